//! The learnable models: listwise-input contextual ranker, pointwise-input
//! ranker and positional propensity model.

mod checkpoint;
mod propensity;
mod rankers;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint};
pub(crate) use propensity::clamp_weight;
pub use propensity::{PropensityModel, PropensityVector};
pub use rankers::{features_tensor, ListwiseRanker, PointwiseRanker};

use crate::autodiff::{ParamStore, Scalar};

/// Width documents are projected to before scoring.
pub const EMBED_DIM: usize = 64;
/// Hidden widths of the scoring MLP shared by both rankers.
pub const HIDDEN_SIZES: [usize; 3] = [32, 16, 8];
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 4;

/// Access to a model's parameters, used by optimizers and checkpoints.
pub trait Model<T: Scalar> {
    /// Short name stored in checkpoints.
    const KIND: &'static str;

    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Architecture settings as `key=value` pairs.
    fn arch(&self) -> Vec<(String, usize)> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NUM_FEATURES;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; NUM_FEATURES]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
            .collect()
    }

    fn mlp_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = mlp_params(&[EMBED_DIM, 32, 16, 8, 1]);
        let proj = NUM_FEATURES * EMBED_DIM + EMBED_DIM;
        let p = PointwiseRanker::<f64>::new(&mut rng);
        assert_eq!(p.params().num_scalars(), proj + head);

        let d = EMBED_DIM;
        let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * 2 * d + 2 * d) + (2 * d * d + d);
        for layers in 1..=4 {
            let l = ListwiseRanker::<f64>::new(layers, 4, &mut rng).unwrap();
            assert_eq!(l.params().num_scalars(), proj + head + layers * per_layer);
            assert_eq!(l.arch(), vec![("layers".into(), layers), ("heads".into(), 4)]);
        }
        assert_eq!(PropensityModel::<f64>::new().params().num_scalars(), 10);
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PointwiseRanker::<f64>::new(&mut rng);
        assert!(p.score(&[0.0; 13]).is_err());
        let l = ListwiseRanker::<f64>::new(2, 4, &mut rng).unwrap();
        assert!(l.score_list(&[vec![0.0; 15]]).is_err());
        assert!(l.score_list::<Vec<f64>>(&[]).is_err());
        assert!(ListwiseRanker::<f64>::new(2, 3, &mut rng).is_err());
        assert!(PropensityModel::<f64>::from_logits(&[0.0; 9]).is_err());
    }

    #[test]
    fn identical_documents_score_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = ListwiseRanker::<f64>::new(2, 4, &mut rng).unwrap();
        let doc = rows(&mut rng, 1)[0];
        let s = l.score_list(&vec![doc; 6]).unwrap();
        assert!(s.iter().all(|&v| v == s[0]));
    }

    #[test]
    fn pointwise_scores_ignore_list_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PointwiseRanker::<f64>::new(&mut rng);
        let list = rows(&mut rng, 7);
        let batch = p.score_batch(&list).unwrap();
        for (r, s) in list.iter().zip(&batch) {
            assert!((p.score(r).unwrap() - s).abs() < 1e-12);
        }
    }

    #[test]
    fn listwise_scores_depend_on_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = ListwiseRanker::<f64>::new(1, 4, &mut rng).unwrap();
        let list = rows(&mut rng, 5);
        let full = l.score_list(&list).unwrap();
        let part = l.score_list(&list[..3]).unwrap();
        assert!(full.iter().zip(&part).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn equal_logits_mean_no_position_bias() {
        let m = PropensityModel::<f64>::new();
        let p = m.propensity();
        assert!(p.normalized.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(m.inverse_weights(&[1, 5, 10], 10.0), vec![1.0; 3]);
    }

    #[test]
    fn propensity_from_logits() {
        let logits: Vec<f64> = (0..10).map(|i| -(i as f64).ln_1p()).collect();
        let m = PropensityModel::from_logits(&logits).unwrap();
        let p = m.propensity();
        for (i, v) in p.normalized.iter().enumerate() {
            assert!((v - 1.0 / (i + 1) as f64).abs() < 1e-12);
        }
        let w = m.inverse_weights(&[1, 2, 10], 5.0);
        assert!((w[1] - 2.0).abs() < 1e-12);
        assert_eq!(w[2], 5.0);
    }

    #[test]
    fn f32_rankers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = ListwiseRanker::<f32>::new(1, 2, &mut rng).unwrap();
        let list = rows(&mut rng, 4);
        assert!(l.score_list(&list).unwrap().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn listwise_scores_follow_permutations(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = ListwiseRanker::<f64>::new(2, 4, &mut rng).unwrap();
            let list = rows(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let permuted: Vec<_> = perm.iter().map(|&i| list[i]).collect();
            let a = l.score_list(&list).unwrap();
            let b = l.score_list(&permuted).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((b[j] - a[i]).abs() < 1e-9);
            }
        }
    }
}
