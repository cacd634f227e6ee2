use super::Model;
use crate::autodiff::{softmax, BoundParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::data::TRAIN_LIST_LEN;
use crate::error::{Error, Result};

/// Examination scores per position and their position-1-normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityVector {
    /// Softmax of the position logits; positive and summing to 1.
    pub scores: Vec<f64>,
    /// `scores[i] / scores[0]`.
    pub normalized: Vec<f64>,
}

/// One free logit per display position.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel<T> {
    params: ParamStore<T>,
    logits: ParamId,
}

impl<T: Scalar> Default for PropensityModel<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> PropensityModel<T> {
    /// All logits start equal, i.e. no position bias.
    pub fn new() -> Self {
        let mut params = ParamStore::new();
        let logits = params.add_filled("logits", vec![TRAIN_LIST_LEN], T::zero());
        Self { params, logits }
    }

    pub fn from_logits(logits: &[T]) -> Result<Self> {
        if logits.len() != TRAIN_LIST_LEN {
            return Err(Error::InvalidArgument(format!(
                "expected {TRAIN_LIST_LEN} logits, got {}",
                logits.len()
            )));
        }
        let mut m = Self::new();
        m.params.get_mut(m.logits).value = Tensor::vector(logits.to_vec());
        Ok(m)
    }

    pub fn logits(&self) -> &[T] {
        self.params.get(self.logits).value.data()
    }

    pub fn num_positions(&self) -> usize {
        TRAIN_LIST_LEN
    }

    /// Gathers the logits of the given 1-based positions (several lists may be
    /// concatenated).
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, positions: &[usize]) -> Result<Var> {
        let idx = positions
            .iter()
            .map(|&pos| {
                if (1..=TRAIN_LIST_LEN).contains(&pos) {
                    Ok(pos - 1)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "position {pos} outside 1..={TRAIN_LIST_LEN}"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        g.gather(p.var(self.logits), &idx)
    }

    pub fn propensity(&self) -> PropensityVector {
        let logits: Vec<f64> = self.logits().iter().map(|l| l.as_f64()).collect();
        let scores = softmax(&logits);
        let first = scores[0];
        let normalized = scores.iter().map(|s| s / first).collect();
        PropensityVector { scores, normalized }
    }

    /// Inverse propensity weights `score(1) / score(i)` clamped to
    /// `[1/clip, clip]`, for the given 1-based positions.
    pub fn inverse_weights(&self, positions: &[usize], clip: f64) -> Vec<T> {
        let l = self.logits();
        positions
            .iter()
            .map(|&p| clamp_weight((l[0] - l[p - 1]).exp(), clip))
            .collect()
    }
}

pub(crate) fn clamp_weight<T: Scalar>(w: T, clip: f64) -> T {
    let hi = T::lit(clip);
    let lo = T::lit(1.0 / clip);
    w.max(lo).min(hi)
}

impl<T: Scalar> Model<T> for PropensityModel<T> {
    const KIND: &'static str = "propensity";

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}
