//! Click simulation under the examination hypothesis.
//!
//! A document shown at position `i` is examined with probability `(1/i)^γ`
//! and, once examined, clicked with a grade-dependent probability
//! `ε + (1-ε)(2^g - 1)/(2^4 - 1)`. Since examination depends on position
//! alone, the true propensity curve is known exactly and learned propensity
//! models can be checked against it.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    AnnotatedDoc, AnnotatedQuery, Features, Session, SessionDoc, MAX_GRADE, NUM_FEATURES,
    TRAIN_LIST_LEN,
};
use crate::error::{Error, Result};

/// How the logged list shown to the simulated user is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialRanker {
    /// Uniformly random order.
    Random,
    /// Descending order of one feature column (0-based) plus Gaussian noise
    /// drawn per session.
    Feature { column: usize, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickModelConfig {
    /// Examination probability at position `i` is `(1/i)^gamma`.
    pub gamma: f64,
    /// Click probability on an examined grade-0 document.
    pub epsilon: f64,
    pub max_grade: u8,
    pub seed: u64,
    pub sessions_per_query: usize,
    /// Number of displayed documents per session.
    pub list_size: usize,
    pub initial_ranker: InitialRanker,
}

impl Default for ClickModelConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon: 0.1,
            max_grade: MAX_GRADE,
            seed: 0,
            sessions_per_query: 50,
            list_size: TRAIN_LIST_LEN,
            initial_ranker: InitialRanker::Random,
        }
    }
}

impl ClickModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must be in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.max_grade != MAX_GRADE {
            return Err(Error::Config(format!("max_grade must be {MAX_GRADE}")));
        }
        if self.list_size == 0 {
            return Err(Error::Config("list_size must be positive".into()));
        }
        if let InitialRanker::Feature { column, noise } = self.initial_ranker {
            if column >= NUM_FEATURES || !(noise >= 0.0) {
                return Err(Error::Config(format!(
                    "feature ranker needs column < {NUM_FEATURES} and noise >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Click probability of an examined document with the given grade.
pub fn relevance_prob(grade: u8, epsilon: f64) -> Result<f64> {
    if grade > MAX_GRADE {
        return Err(Error::InvalidArgument(format!(
            "grade {grade} outside 0..={MAX_GRADE}"
        )));
    }
    let max_gain = f64::from((1u32 << MAX_GRADE) - 1);
    let gain = f64::from((1u32 << grade) - 1);
    Ok(epsilon + (1.0 - epsilon) * gain / max_gain)
}

/// `(1/position)^gamma` for a 1-based position.
pub fn examination_prob(position: usize, gamma: f64) -> f64 {
    (1.0 / position as f64).powf(gamma)
}

/// Known propensities and the relevance probabilities used while simulating.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub gamma: f64,
    pub epsilon: f64,
    /// Normalized propensity per position; first entry is 1.
    pub propensity: Vec<f64>,
    /// Click-given-examination probability per displayed document, one row per session.
    pub relevance: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Header comment plus one line with the propensity vector.
    pub fn to_text(&self, header: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {header} gamma={} epsilon={}",
            self.gamma, self.epsilon
        );
        out.push_str(&format_vector(&self.propensity));
        out.push('\n');
        out
    }
}

pub fn export_ground_truth(cfg: &ClickModelConfig) -> GroundTruth {
    let first = examination_prob(1, cfg.gamma);
    GroundTruth {
        gamma: cfg.gamma,
        epsilon: cfg.epsilon,
        propensity: (1..=TRAIN_LIST_LEN)
            .map(|i| examination_prob(i, cfg.gamma) / first)
            .collect(),
        relevance: Vec::new(),
    }
}

pub fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Reads a one-line whitespace-separated float vector, skipping `#` lines.
pub fn parse_vector(text: &str, src: &str) -> Result<Vec<f64>> {
    let mut found = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if found.is_some() {
            return Err(Error::parse(src, i + 1, "expected a single vector line"));
        }
        let v = t
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(src, i + 1, format!("bad number `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        found = Some(v);
    }
    found.ok_or_else(|| Error::parse(src, 0, "no vector found"))
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vector(&text, &path.display().to_string())
}

/// Checks that `ranking` is a permutation of `0..n`.
fn check_permutation(ranking: &[usize], n: usize) -> Result<()> {
    if ranking.len() != n {
        return Err(Error::InvalidArgument(format!(
            "ranking has {} entries for {n} documents",
            ranking.len()
        )));
    }
    let mut seen = vec![false; n];
    for &r in ranking {
        if r >= n || std::mem::replace(&mut seen[r], true) {
            return Err(Error::InvalidArgument(format!(
                "ranking is not a permutation (entry {r})"
            )));
        }
    }
    Ok(())
}

/// Simulates one session: the first `list_size` documents of `ranking` are
/// shown and each is clicked independently with probability
/// `relevance_prob(grade) * (1/position)^gamma`.
///
/// Returns the session and the relevance probabilities of the shown documents.
pub fn simulate_session<R: Rng + ?Sized>(
    query: &AnnotatedQuery,
    ranking: &[usize],
    cfg: &ClickModelConfig,
    rng: &mut R,
) -> Result<(Session, Vec<f64>)> {
    check_permutation(ranking, query.docs.len())?;
    let shown = ranking.len().min(cfg.list_size);
    let mut docs = Vec::with_capacity(shown);
    let mut rel = Vec::with_capacity(shown);
    for (i, &d) in ranking[..shown].iter().enumerate() {
        let doc = &query.docs[d];
        let position = i + 1;
        let r = relevance_prob(doc.grade, cfg.epsilon)?;
        let p = r * examination_prob(position, cfg.gamma);
        let click = rng.random::<f64>() < p;
        docs.push(SessionDoc {
            features: doc.features,
            position,
            click,
        });
        rel.push(r);
    }
    Ok((Session::new(query.query_id.clone(), docs)?, rel))
}

/// Logged ranking produced by the configured initial ranker.
pub fn initial_ranking<R: Rng + ?Sized>(
    query: &AnnotatedQuery,
    ranker: &InitialRanker,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = query.docs.len();
    let mut order: Vec<usize> = (0..n).collect();
    match *ranker {
        InitialRanker::Random => order.shuffle(rng),
        InitialRanker::Feature { column, noise } => {
            let normal = Normal::new(0.0, noise)
                .map_err(|e| Error::Config(format!("logging noise: {e}")))?;
            let keys: Vec<f64> = query
                .docs
                .iter()
                .map(|d| d.features[column] + normal.sample(rng))
                .collect();
            order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
        }
    }
    Ok(order)
}

/// Owns the random stream for a simulation run.
#[derive(Debug, Clone)]
pub struct ClickSimulator {
    cfg: ClickModelConfig,
    rng: ChaCha8Rng,
}

impl ClickSimulator {
    pub fn new(cfg: ClickModelConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, rng })
    }

    pub fn config(&self) -> &ClickModelConfig {
        &self.cfg
    }

    pub fn simulate(&mut self, query: &AnnotatedQuery) -> Result<(Session, Vec<f64>)> {
        let ranking = initial_ranking(query, &self.cfg.initial_ranker, &mut self.rng)?;
        simulate_session(query, &ranking, &self.cfg, &mut self.rng)
    }

    /// `sessions_per_query` sessions for every query, query-major order.
    pub fn simulate_corpus(
        &mut self,
        queries: &[AnnotatedQuery],
    ) -> Result<(Vec<Session>, GroundTruth)> {
        let mut truth = export_ground_truth(&self.cfg);
        let mut sessions = Vec::with_capacity(queries.len() * self.cfg.sessions_per_query);
        for q in queries {
            for _ in 0..self.cfg.sessions_per_query {
                let (s, rel) = self.simulate(q)?;
                sessions.push(s);
                truth.relevance.push(rel);
            }
        }
        Ok((sessions, truth))
    }
}

/// Settings for generating a synthetic annotated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub num_queries: usize,
    pub min_docs: usize,
    pub max_docs: usize,
    pub seed: u64,
    /// Prefix for generated query ids.
    pub prefix: String,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            num_queries: 1000,
            min_docs: 10,
            max_docs: 30,
            seed: 0,
            prefix: "q".into(),
        }
    }
}

/// Grade distribution of generated documents (skewed towards irrelevant).
const GRADE_WEIGHTS: [f64; 5] = [0.40, 0.25, 0.17, 0.12, 0.06];

/// Column the default logging ranker sorts by: weakly informative on its own.
pub const LOGGING_FEATURE: usize = 8;

/// Generates graded queries whose 14 features carry noisy, partly nonlinear
/// evidence of the grade, with per-query scale shifts and pure-noise columns.
pub fn generate_annotated(cfg: &SyntheticCorpusConfig) -> Result<Vec<AnnotatedQuery>> {
    if cfg.min_docs == 0 || cfg.min_docs > cfg.max_docs {
        return Err(Error::Config(format!(
            "need 0 < min_docs <= max_docs, got {}..{}",
            cfg.min_docs, cfg.max_docs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let total: f64 = GRADE_WEIGHTS.iter().sum();
    let mut queries = Vec::with_capacity(cfg.num_queries);
    for qi in 0..cfg.num_queries {
        let n = rng.random_range(cfg.min_docs..=cfg.max_docs);
        let q_shift: f64 = std.sample(&mut rng);
        let q_scale: f64 = 0.5 + rng.random::<f64>() * 1.5;
        let q_noise: [f64; 3] = std::array::from_fn(|_| std.sample(&mut rng));
        let mut docs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut grade = 0u8;
            for (g, w) in GRADE_WEIGHTS.iter().enumerate() {
                if u < *w {
                    grade = g as u8;
                    break;
                }
                u -= w;
                grade = g as u8;
            }
            let z = f64::from(grade) + 0.8 * std.sample(&mut rng);
            let mut e = || std.sample(&mut rng);
            let f: Features = [
                z + 1.0 * e(),
                (0.4 * z).exp() + 0.5 * e(),
                (0.7 * z - 1.0).tanh() + 0.3 * e(),
                q_scale * (z + 2.0) + 1.5 * e(),
                q_shift + 0.6 * z + 0.8 * e(),
                (z - 2.0).powi(2) * 0.3 + e(),
                0.3 * z + 1.2 * e(),
                (z > 2.0) as u8 as f64 + 0.5 * e(),
                0.4 * z + 1.5 * e(),
                q_noise[0] + 0.2 * e(),
                q_noise[1] * 2.0 + e(),
                e(),
                q_noise[2] + e(),
                e().abs(),
            ];
            docs.push(AnnotatedDoc { features: f, grade });
        }
        queries.push(AnnotatedQuery {
            query_id: format!("{}{qi}", cfg.prefix),
            docs,
        });
    }
    Ok(queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn query(grades: &[u8]) -> AnnotatedQuery {
        AnnotatedQuery {
            query_id: "q".into(),
            docs: grades
                .iter()
                .enumerate()
                .map(|(i, &g)| AnnotatedDoc {
                    features: [i as f64; NUM_FEATURES],
                    grade: g,
                })
                .collect(),
        }
    }

    #[test]
    fn relevance_prob_examples() {
        assert_abs_diff_eq!(relevance_prob(0, 0.1).unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(relevance_prob(4, 0.1).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(relevance_prob(2, 0.0).unwrap(), 0.2, epsilon = 1e-15);
        assert!(relevance_prob(5, 0.1).is_err());
    }

    #[test]
    fn examination_examples() {
        assert_eq!(examination_prob(2, 1.0), 0.5);
        assert_eq!(examination_prob(7, 0.0), 1.0);
    }

    #[test]
    fn ground_truth_vectors() {
        let gt = export_ground_truth(&ClickModelConfig::default());
        let expected: Vec<f64> = (1..=10).map(|i| 1.0 / i as f64).collect();
        for (a, b) in gt.propensity.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let flat = export_ground_truth(&ClickModelConfig {
            gamma: 0.0,
            ..Default::default()
        });
        assert!(flat.propensity.iter().all(|&p| p == 1.0));
        for gamma in [0.1, 0.5, 2.0] {
            let gt = export_ground_truth(&ClickModelConfig {
                gamma,
                ..Default::default()
            });
            assert_eq!(gt.propensity[0], 1.0);
        }
    }

    #[test]
    fn ground_truth_text_round_trip() {
        let gt = export_ground_truth(&ClickModelConfig::default());
        let text = gt.to_text("test");
        assert!(text.starts_with("# test gamma=1 epsilon=0.1\n"));
        assert_eq!(parse_vector(&text, "t").unwrap(), gt.propensity);
        assert!(parse_vector("1 2\n3 4\n", "t").is_err());
        assert!(parse_vector("# only a header\n", "t").is_err());
    }

    #[test]
    fn no_bias_perfect_relevance_clicks_everything() {
        let cfg = ClickModelConfig {
            gamma: 0.0,
            epsilon: 0.0,
            ..Default::default()
        };
        let q = query(&[4; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranking: Vec<usize> = (0..10).collect();
        for _ in 0..50 {
            let (s, _) = simulate_session(&q, &ranking, &cfg, &mut rng).unwrap();
            assert_eq!(s.num_clicks(), 10);
        }
    }

    #[test]
    fn ranking_must_be_permutation() {
        let q = query(&[1, 2, 3]);
        let cfg = ClickModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(simulate_session(&q, &[0, 1, 1], &cfg, &mut rng).is_err());
        assert!(simulate_session(&q, &[0, 1], &cfg, &mut rng).is_err());
        assert!(simulate_session(&q, &[0, 1, 3], &cfg, &mut rng).is_err());
    }

    #[test]
    fn session_follows_ranking_and_truncates() {
        let grades: Vec<u8> = (0..12).map(|i| (i % 5) as u8).collect();
        let q = query(&grades);
        let ranking: Vec<usize> = (0..12).rev().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, rel) = simulate_session(&q, &ranking, &ClickModelConfig::default(), &mut rng).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.docs[0].features[0], 11.0);
        assert_eq!(s.docs[0].position, 1);
        assert_abs_diff_eq!(rel[0], relevance_prob(grades[11], 0.1).unwrap());
    }

    #[test]
    fn monte_carlo_click_rates_match_closed_form() {
        let grades = [4, 3, 2, 1, 0, 4, 3, 2, 1, 0];
        let q = query(&grades);
        let cfg = ClickModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ranking: Vec<usize> = (0..10).collect();
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let (s, _) = simulate_session(&q, &ranking, &cfg, &mut rng).unwrap();
            for (c, d) in counts.iter_mut().zip(&s.docs) {
                *c += usize::from(d.click);
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let expected = relevance_prob(grades[i], 0.1).unwrap() * examination_prob(i + 1, 1.0);
            let rate = c as f64 / n as f64;
            assert!((rate - expected).abs() <= 0.01, "pos {}: {rate} vs {expected}", i + 1);
        }
    }

    #[test]
    fn no_position_bias_passes_chi_square() {
        let q = query(&[2; 10]);
        let cfg = ClickModelConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ranking: Vec<usize> = (0..10).collect();
        let mut counts = [0f64; 10];
        for _ in 0..20_000 {
            let (s, _) = simulate_session(&q, &ranking, &cfg, &mut rng).unwrap();
            for (c, d) in counts.iter_mut().zip(&s.docs) {
                *c += f64::from(u8::from(d.click));
            }
        }
        let expected = counts.iter().sum::<f64>() / 10.0;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new(9.0).unwrap().inverse_cdf(0.99);
        assert!(stat < critical, "chi2 {stat} >= {critical}");
    }

    #[test]
    fn simulation_is_reproducible() {
        let corpus = generate_annotated(&SyntheticCorpusConfig {
            num_queries: 20,
            ..Default::default()
        })
        .unwrap();
        let cfg = ClickModelConfig {
            seed: 9,
            sessions_per_query: 3,
            initial_ranker: InitialRanker::Feature {
                column: LOGGING_FEATURE,
                noise: 1.0,
            },
            ..Default::default()
        };
        let (a, _) = ClickSimulator::new(cfg.clone()).unwrap().simulate_corpus(&corpus).unwrap();
        let (b, _) = ClickSimulator::new(cfg).unwrap().simulate_corpus(&corpus).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
    }

    #[test]
    fn generator_respects_bounds() {
        let cfg = SyntheticCorpusConfig {
            num_queries: 50,
            min_docs: 12,
            max_docs: 15,
            seed: 1,
            prefix: "t".into(),
        };
        let qs = generate_annotated(&cfg).unwrap();
        assert_eq!(qs.len(), 50);
        assert!(qs.iter().all(|q| (12..=15).contains(&q.docs.len())));
        assert!(qs.iter().flat_map(|q| &q.docs).all(|d| d.grade <= MAX_GRADE));
        assert_eq!(qs, generate_annotated(&cfg).unwrap());
        assert!(generate_annotated(&SyntheticCorpusConfig {
            min_docs: 5,
            max_docs: 4,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ClickModelConfig::default().validate().is_ok());
        for bad in [
            ClickModelConfig { gamma: -1.0, ..Default::default() },
            ClickModelConfig { epsilon: 1.0, ..Default::default() },
            ClickModelConfig { list_size: 0, ..Default::default() },
            ClickModelConfig {
                initial_ranker: InitialRanker::Feature { column: 14, noise: 0.0 },
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
