use rand::Rng;

use super::{Model, EMBED_DIM, HIDDEN_SIZES};
use crate::autodiff::{BoundParams, Encoder, Graph, Linear, Mlp, ParamStore, Scalar, Segments, Tensor, Var};
use crate::data::NUM_FEATURES;
use crate::error::{Error, Result};

/// Stacks feature rows into a `[rows × 14]` tensor.
pub fn features_tensor<T: Scalar, F: AsRef<[f64]>>(rows: &[F]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * NUM_FEATURES);
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != NUM_FEATURES {
            return Err(Error::InvalidArgument(format!(
                "document {i} has {} features, expected {NUM_FEATURES}",
                r.len()
            )));
        }
        data.extend(r.iter().map(|&v| T::lit(v)));
    }
    Tensor::matrix(rows.len(), NUM_FEATURES, data)
}

fn head_sizes() -> Vec<usize> {
    let mut s = vec![EMBED_DIM];
    s.extend(HIDDEN_SIZES);
    s.push(1);
    s
}

fn flatten<T: Scalar>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    let n = g.value(scores).rows();
    g.reshape(scores, vec![n])
}

/// Scores each document from its own features: projection then MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseRanker<T> {
    params: ParamStore<T>,
    projection: Linear,
    head: Mlp,
}

impl<T: Scalar> PointwiseRanker<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let projection = Linear::new(&mut params, "projection", NUM_FEATURES, EMBED_DIM, rng);
        let head = Mlp::new(&mut params, "head", &head_sizes(), rng);
        Self {
            params,
            projection,
            head,
        }
    }

    /// `x` is `[docs × 14]`; returns a `[docs]` score vector.
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.projection.forward(g, p, x)?;
        let s = self.head.forward(g, p, h)?;
        flatten(g, s)
    }

    pub fn score(&self, features: &[f64]) -> Result<T> {
        Ok(self.score_batch(&[features])?[0])
    }

    pub fn score_batch<F: AsRef<[f64]>>(&self, rows: &[F]) -> Result<Vec<T>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let x = g.constant(features_tensor(rows)?)?;
        let s = self.forward(&mut g, &p, x)?;
        Ok(g.value(s).data().to_vec())
    }
}

impl<T: Scalar> Model<T> for PointwiseRanker<T> {
    const KIND: &'static str = "pointwise";

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

/// Scores a whole list at once: projection, self-attention encoder over the
/// list, then the same MLP head shape as [`PointwiseRanker`].
#[derive(Debug, Clone, PartialEq)]
pub struct ListwiseRanker<T> {
    params: ParamStore<T>,
    projection: Linear,
    encoder: Encoder,
    head: Mlp,
}

impl<T: Scalar> ListwiseRanker<T> {
    pub fn new<R: Rng + ?Sized>(layers: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let projection = Linear::new(&mut params, "projection", NUM_FEATURES, EMBED_DIM, rng);
        let encoder = Encoder::new(&mut params, "encoder", EMBED_DIM, layers, heads, rng)?;
        let head = Mlp::new(&mut params, "head", &head_sizes(), rng);
        Ok(Self {
            params,
            projection,
            encoder,
            head,
        })
    }

    pub fn layers(&self) -> usize {
        self.encoder.layers()
    }

    pub fn heads(&self) -> usize {
        self.encoder.heads()
    }

    /// `x` stacks several lists (`segs`) of documents; returns `[docs]` scores.
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, segs: &Segments) -> Result<Var> {
        let h = self.projection.forward(g, p, x)?;
        let h = self.encoder.forward(g, p, h, segs)?;
        let s = self.head.forward(g, p, h)?;
        flatten(g, s)
    }

    pub fn score_list<F: AsRef<[f64]>>(&self, rows: &[F]) -> Result<Vec<T>> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("cannot score an empty list".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let x = g.constant(features_tensor(rows)?)?;
        let s = self.forward(&mut g, &p, x, &Segments::single(rows.len()))?;
        Ok(g.value(s).data().to_vec())
    }
}

impl<T: Scalar> Model<T> for ListwiseRanker<T> {
    const KIND: &'static str = "listwise";

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn arch(&self) -> Vec<(String, usize)> {
        vec![
            ("layers".into(), self.layers()),
            ("heads".into(), self.heads()),
        ]
    }
}
