//! Unbiased learning to rank from click logs.
//!
//! The crate covers the whole loop: synthetic click simulation under a
//! position-based examination model, training of rankers and a positional
//! propensity model (naive, IPW, dual learning, contextual dual learning and
//! its listwise-distilled variants), and nDCG/ERR evaluation with paired
//! significance tests.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix it to `f64`, which is what training uses.

pub mod autodiff;
pub mod clicksim;
pub mod data;
mod error;
mod util;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod training;

pub use autodiff::{Graph, Scalar, Segments, Tensor, Var};
pub use error::{Error, Result};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ListwiseRanker64 = models::ListwiseRanker<f64>;
pub type PointwiseRanker64 = models::PointwiseRanker<f64>;
pub type PropensityModel64 = models::PropensityModel<f64>;
pub type TrainedModels64 = training::TrainedModels<f64>;


pub type Tensor32 = autodiff::Tensor<f32>;
pub type PointwiseRanker32 = models::PointwiseRanker<f32>;
pub type ListwiseRanker32 = models::ListwiseRanker<f32>;

/// Library version, recorded in every file header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
