//! Listwise softmax losses.
//!
//! Every loss here has the form `-Σ_i w_i · log softmax(s)_i` over one list,
//! with constant per-document weights `w`. The per-list functions validate
//! their inputs; [`weighted_softmax_loss`] is the batched graph version used
//! during training and averages over lists.

use crate::autodiff::{log_softmax, softmax, Graph, Scalar, Segments, Tensor, Var};
use crate::error::{Error, Result};

/// Batched `mean over lists of -Σ_i w_i log softmax(scores)_i`.
pub fn weighted_softmax_loss<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    segs: &Segments,
    weights: &[T],
) -> Result<Var> {
    if weights.len() != segs.total() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} scores",
            weights.len(),
            segs.total()
        )));
    }
    let ls = g.log_softmax(scores, segs)?;
    let w = g.constant(Tensor::vector(weights.to_vec()))?;
    let prod = g.mul(ls, w)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -T::one() / T::lit(segs.count().max(1) as f64)))
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "{what}: lengths {a} and {b} differ"
        )));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty list")));
    }
    Ok(())
}

fn weighted_nll<T: Scalar>(scores: &[T], weights: &[T]) -> T {
    log_softmax(scores)
        .iter()
        .zip(weights)
        .fold(T::zero(), |acc, (&l, &w)| acc - w * l)
}

/// `-Σ_i t_i log softmax(s)_i` for nonnegative targets with at least one positive.
pub fn loss_listwise_softmax<T: Scalar>(scores: &[T], targets: &[T]) -> Result<T> {
    check_lengths(scores.len(), targets.len(), "listwise softmax loss")?;
    if targets.iter().any(|&t| t < T::zero() || !t.is_finite()) {
        return Err(Error::InvalidArgument("targets must be finite and >= 0".into()));
    }
    if targets.iter().all(|&t| t == T::zero()) {
        return Err(Error::InvalidArgument(
            "listwise softmax loss is undefined for all-zero targets".into(),
        ));
    }
    Ok(weighted_nll(scores, targets))
}

fn clicked_weights<T: Scalar>(clicks: &[bool], weights: &[T], what: &str) -> Result<Vec<T>> {
    check_lengths(clicks.len(), weights.len(), what)?;
    if weights.iter().any(|&w| !(w > T::zero()) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what}: weights must be positive")));
    }
    if !clicks.iter().any(|&c| c) {
        return Err(Error::InvalidArgument(format!("{what}: no clicks")));
    }
    Ok(clicks
        .iter()
        .zip(weights)
        .map(|(&c, &w)| if c { w } else { T::zero() })
        .collect())
}

/// Inverse-propensity-weighted softmax loss for the ranker:
/// `-Σ_{clicked} w_i log softmax(f)_i`.
pub fn loss_ipw<T: Scalar>(scores: &[T], clicks: &[bool], weights: &[T]) -> Result<T> {
    check_lengths(scores.len(), clicks.len(), "ipw loss")?;
    let w = clicked_weights(clicks, weights, "ipw loss")?;
    Ok(weighted_nll(scores, &w))
}

/// Inverse-relevance-weighted softmax loss for the propensity model:
/// `-Σ_{clicked} v_i log softmax(g)_i` over the position logits of the list.
pub fn loss_irw<T: Scalar>(propensity_logits: &[T], clicks: &[bool], weights: &[T]) -> Result<T> {
    check_lengths(propensity_logits.len(), clicks.len(), "irw loss")?;
    let v = clicked_weights(clicks, weights, "irw loss")?;
    Ok(weighted_nll(propensity_logits, &v))
}

/// Listwise distillation: cross-entropy of the student's softmax against the
/// teacher's softmax, `-Σ_i softmax(f)_i log softmax(h)_i`.
pub fn loss_distill<T: Scalar>(teacher: &[T], student: &[T]) -> Result<T> {
    check_lengths(teacher.len(), student.len(), "distillation loss")?;
    Ok(weighted_nll(student, &softmax(teacher)))
}

/// Entropy of the teacher's softmax distribution, the lower bound of
/// [`loss_distill`].
pub fn softmax_entropy<T: Scalar>(scores: &[T]) -> T {
    softmax(scores)
        .iter()
        .zip(log_softmax(scores))
        .fold(T::zero(), |acc, (&p, l)| acc - p * l)
}

/// Relevance weights for the propensity loss: `softmax(f)_1 / softmax(f)_i`,
/// i.e. `exp(f_1 - f_i)`, clamped to `[1/clip, clip]`. `scores` is one list in
/// display order.
pub fn inverse_relevance_weights<T: Scalar>(scores: &[T], clip: f64) -> Vec<T> {
    let first = scores[0];
    scores
        .iter()
        .map(|&s| crate::models::clamp_weight((first - s).exp(), clip))
        .collect()
}
