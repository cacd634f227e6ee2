//! Reverse-mode automatic differentiation over small dense tensors, the layers
//! the rankers are built from, and the AdamW optimizer.

mod graph;
mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{log_softmax, softmax, Graph, Segments, Var};
pub use layers::{attention_encode, Encoder, Linear, Mlp};
pub use optim::{AdamW, AdamWConfig};
pub use params::{BoundParams, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
