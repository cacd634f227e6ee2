use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{inverse_relevance_weights, weighted_softmax_loss};
use crate::autodiff::{softmax, AdamW, AdamWConfig, Graph, Scalar, Segments};
use crate::data::{Session, TRAIN_LIST_LEN};
use crate::error::{Error, Result};
use crate::models::{
    clamp_weight, features_tensor, ListwiseRanker, Model, PointwiseRanker, PropensityModel,
    DEFAULT_HEADS, DEFAULT_LAYERS,
};

/// Training procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pointwise ranker fitted to raw clicks.
    Naive,
    /// Pointwise ranker with fixed, externally supplied propensities.
    Ipw,
    /// Pointwise ranker and propensity model trained jointly.
    Dla,
    /// Listwise ranker and propensity model trained jointly.
    Cdla,
    /// `Cdla` plus a pointwise student distilled from the listwise ranker.
    CdlaLd,
    /// Listwise ranker fitted to clicks; its softmax replaces the clicks when
    /// training a pointwise ranker and propensity model jointly.
    CDlaLd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::Ipw,
        Method::Dla,
        Method::Cdla,
        Method::CdlaLd,
        Method::CDlaLd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Ipw => "ipw",
            Method::Dla => "dla",
            Method::Cdla => "cdla",
            Method::CdlaLd => "cdla_ld",
            Method::CDlaLd => "c_dla_ld",
        }
    }

    pub fn uses_listwise(self) -> bool {
        matches!(self, Method::Cdla | Method::CdlaLd | Method::CDlaLd)
    }

    pub fn uses_pointwise(self) -> bool {
        !matches!(self, Method::Cdla)
    }

    pub fn uses_propensity(self) -> bool {
        !matches!(self, Method::Naive | Method::Ipw)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from the full rate at the first step to zero after
    /// `steps` steps.
    Linear,
}

impl LrSchedule {
    fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => (1.0 - step as f64 / steps.max(1) as f64).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Sessions (queries) per step.
    pub batch_size: usize,
    pub steps: usize,
    /// Learning rate of the rankers.
    pub learning_rate: f64,
    /// Learning rate of the propensity model; defaults to `learning_rate`.
    pub propensity_learning_rate: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    /// Weight decay of the propensity model; defaults to `weight_decay`.
    pub propensity_weight_decay: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Inverse weights are clamped to `[1/weight_clip_max, weight_clip_max]`.
    pub weight_clip_max: f64,
    pub seed: u64,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Propensity vector file for `ipw`.
    pub ipw_propensity_path: Option<PathBuf>,
    /// `c_dla_ld` only: steps during which the listwise model alone is
    /// fitted before the pointwise ranker and propensity model join. Zero
    /// trains all three simultaneously.
    pub teacher_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            method: Method::CdlaLd,
            batch_size: 30,
            steps: 1000,
            learning_rate: adam.learning_rate,
            propensity_learning_rate: None,
            lr_schedule: LrSchedule::Constant,
            weight_decay: adam.weight_decay,
            propensity_weight_decay: None,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            weight_clip_max: 10.0,
            seed: 0,
            encoder_layers: DEFAULT_LAYERS,
            encoder_heads: DEFAULT_HEADS,
            ipw_propensity_path: None,
            teacher_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_clip_max >= 1.0) {
            return Err(Error::Config("weight_clip_max must be >= 1".into()));
        }
        let lrs = [Some(self.learning_rate), self.propensity_learning_rate];
        if lrs.iter().flatten().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.method.uses_listwise() && !(1..=4).contains(&self.encoder_layers) {
            return Err(Error::Config("encoder_layers must be in 1..=4".into()));
        }
        Ok(())
    }

    fn ranker_adam(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    fn propensity_adam(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.propensity_learning_rate.unwrap_or(self.learning_rate),
            weight_decay: self.propensity_weight_decay.unwrap_or(self.weight_decay),
            ..self.ranker_adam()
        }
    }
}

/// One loss value recorded at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub name: &'static str,
    pub value: f64,
}

/// Loss curves as TSV: `step`, `loss`, `value`.
pub fn format_loss_tsv(losses: &[LossReport]) -> String {
    let mut out = String::from("step\tloss\tvalue\n");
    for l in losses {
        out.push_str(&format!("{}\t{}\t{}\n", l.step, l.name, l.value));
    }
    out
}

/// The models a method trains; absent ones are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels<T> {
    pub method: Method,
    pub listwise: Option<ListwiseRanker<T>>,
    pub pointwise: Option<PointwiseRanker<T>>,
    pub propensity: Option<PropensityModel<T>>,
}

/// Model used to rank documents at evaluation time.
#[derive(Debug, Clone, Copy)]
pub enum EvalRanker<'a, T> {
    Listwise(&'a ListwiseRanker<T>),
    Pointwise(&'a PointwiseRanker<T>),
}

impl<T: Scalar> EvalRanker<'_, T> {
    /// Scores a full candidate list.
    pub fn score_list<F: AsRef<[f64]>>(&self, rows: &[F]) -> Result<Vec<f64>> {
        let s = match self {
            EvalRanker::Listwise(m) => m.score_list(rows)?,
            EvalRanker::Pointwise(m) => m.score_batch(rows)?,
        };
        Ok(s.into_iter().map(Scalar::as_f64).collect())
    }
}

impl<T: Scalar> TrainedModels<T> {
    /// Fresh models for `cfg.method`. Each model draws its initialization
    /// from its own random stream, so adding or removing a model never
    /// changes the others.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let m = cfg.method;
        let listwise = if m.uses_listwise() {
            let mut rng = stream(cfg.seed, STREAM_LISTWISE);
            Some(ListwiseRanker::new(cfg.encoder_layers, cfg.encoder_heads, &mut rng)?)
        } else {
            None
        };
        let pointwise = m.uses_pointwise().then(|| {
            let mut rng = stream(cfg.seed, STREAM_POINTWISE);
            PointwiseRanker::new(&mut rng)
        });
        let propensity = m.uses_propensity().then(PropensityModel::new);
        Ok(Self {
            method: m,
            listwise,
            pointwise,
            propensity,
        })
    }

    /// Pointwise student for distilled and pointwise methods, the listwise
    /// model for `cdla`.
    pub fn eval_ranker(&self) -> Result<EvalRanker<'_, T>> {
        let missing = || Error::Config(format!("{} models lack their evaluation ranker", self.method));
        if self.method == Method::Cdla {
            self.listwise.as_ref().map(EvalRanker::Listwise).ok_or_else(missing)
        } else {
            self.pointwise.as_ref().map(EvalRanker::Pointwise).ok_or_else(missing)
        }
    }
}

const STREAM_BATCHES: u64 = 1;
const STREAM_LISTWISE: u64 = 2;
const STREAM_POINTWISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A batch of equally treated lists flattened for the graph.
struct Batch {
    rows: Vec<[f64; crate::data::NUM_FEATURES]>,
    positions: Vec<usize>,
    clicks: Vec<bool>,
    segs: Segments,
}

impl Batch {
    fn new(sessions: &[&Session]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut clicks = Vec::new();
        let mut lengths = Vec::with_capacity(sessions.len());
        for s in sessions {
            if s.is_empty() || s.len() > TRAIN_LIST_LEN {
                return Err(Error::InvalidArgument(format!(
                    "session `{}` has {} documents; training lists hold 1..={TRAIN_LIST_LEN}",
                    s.query_id,
                    s.len()
                )));
            }
            for d in &s.docs {
                rows.push(d.features);
                positions.push(d.position);
                clicks.push(d.click);
            }
            lengths.push(s.len());
        }
        Ok(Self {
            rows,
            positions,
            clicks,
            segs: Segments::from_lengths(&lengths),
        })
    }

    fn click_targets<T: Scalar>(&self) -> Vec<T> {
        self.clicks
            .iter()
            .map(|&c| if c { T::one() } else { T::zero() })
            .collect()
    }

    fn check_clicks(&self, sessions: &[&Session]) -> Result<()> {
        for (s, r) in sessions.iter().zip(self.segs.iter()) {
            if !self.clicks[r].iter().any(|&c| c) {
                return Err(Error::InvalidArgument(format!(
                    "session `{}` has no clicks; filter sessions before training",
                    s.query_id
                )));
            }
        }
        Ok(())
    }
}

/// Per-segment softmax of plain values.
fn segment_softmax<T: Scalar>(values: &[T], segs: &Segments) -> Vec<T> {
    segs.iter().flat_map(|r| softmax(&values[r])).collect()
}

/// `exp(f_first - f_i)` per segment, clamped.
fn segment_relevance_weights<T: Scalar>(scores: &[T], segs: &Segments, clip: f64) -> Vec<T> {
    segs.iter()
        .flat_map(|r| inverse_relevance_weights(&scores[r], clip))
        .collect()
}

/// Differentiable forward pass of one model, kept until its loss is attached.
struct Pass<T> {
    graph: Graph<T>,
    bound: crate::autodiff::BoundParams,
    out: crate::autodiff::Var,
}

impl<T: Scalar> Pass<T> {
    fn values(&self) -> Vec<T> {
        self.graph.value(self.out).data().to_vec()
    }

    /// Attaches the weighted softmax loss, backpropagates and stores the
    /// gradients in `model`. Returns the loss value.
    fn finish<M: Model<T>>(mut self, segs: &Segments, weights: &[T], model: &mut M) -> Result<f64> {
        let loss = weighted_softmax_loss(&mut self.graph, self.out, segs, weights)?;
        self.graph.backward(loss)?;
        model.params_mut().collect_grads(&self.graph, &self.bound);
        Ok(self.graph.value(loss).data()[0].as_f64())
    }
}

fn pointwise_pass<T: Scalar>(m: &PointwiseRanker<T>, b: &Batch) -> Result<Pass<T>> {
    let mut graph = Graph::new();
    let bound = m.params().bind(&mut graph)?;
    let x = graph.constant(features_tensor(&b.rows)?)?;
    let out = m.forward(&mut graph, &bound, x)?;
    Ok(Pass { graph, bound, out })
}

fn listwise_pass<T: Scalar>(m: &ListwiseRanker<T>, b: &Batch) -> Result<Pass<T>> {
    let mut graph = Graph::new();
    let bound = m.params().bind(&mut graph)?;
    let x = graph.constant(features_tensor(&b.rows)?)?;
    let out = m.forward(&mut graph, &bound, x, &b.segs)?;
    Ok(Pass { graph, bound, out })
}

fn propensity_pass<T: Scalar>(m: &PropensityModel<T>, b: &Batch) -> Result<Pass<T>> {
    let mut graph = Graph::new();
    let bound = m.params().bind(&mut graph)?;
    let out = m.forward(&mut graph, &bound, &b.positions)?;
    Ok(Pass { graph, bound, out })
}

fn mul<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// Runs the optimization of one method over a fixed session set.
pub struct Trainer<T> {
    cfg: TrainConfig,
    models: TrainedModels<T>,
    opt_listwise: Option<AdamW<T>>,
    opt_pointwise: Option<AdamW<T>>,
    opt_propensity: Option<AdamW<T>>,
    fixed_weights: Option<Vec<T>>,
    batch_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    /// `ipw_propensity` is required for `ipw` and ignored otherwise: one
    /// positive examination score per position 1..=10.
    pub fn new(cfg: TrainConfig, ipw_propensity: Option<&[f64]>) -> Result<Self> {
        cfg.validate()?;
        let models = TrainedModels::init(&cfg)?;
        let fixed_weights = if cfg.method == Method::Ipw {
            let p = ipw_propensity.ok_or_else(|| {
                Error::Config("ipw needs a propensity vector (ipw_propensity_path)".into())
            })?;
            if p.len() != TRAIN_LIST_LEN || p.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config(format!(
                    "ipw propensity must hold {TRAIN_LIST_LEN} positive values"
                )));
            }
            Some(
                p.iter()
                    .map(|&x| clamp_weight(T::lit(p[0] / x), cfg.weight_clip_max))
                    .collect(),
            )
        } else {
            None
        };
        Self::with_models(cfg, models, fixed_weights)
    }

    fn with_models(cfg: TrainConfig, models: TrainedModels<T>, fixed_weights: Option<Vec<T>>) -> Result<Self> {
        let ranker = cfg.ranker_adam();
        let opt_listwise = models.listwise.as_ref().map(|m| AdamW::new(ranker, m.params()));
        let opt_pointwise = models.pointwise.as_ref().map(|m| AdamW::new(ranker, m.params()));
        let opt_propensity = models
            .propensity
            .as_ref()
            .map(|m| AdamW::new(cfg.propensity_adam(), m.params()));
        let batch_rng = stream(cfg.seed, STREAM_BATCHES);
        Ok(Self {
            cfg,
            models,
            opt_listwise,
            opt_pointwise,
            opt_propensity,
            fixed_weights,
            batch_rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn models(&self) -> &TrainedModels<T> {
        &self.models
    }

    pub fn into_models(self) -> TrainedModels<T> {
        self.models
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Next batch indices: sessions are visited in reshuffled epochs.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.batch_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Runs `cfg.steps` steps and returns every recorded loss.
    pub fn fit(&mut self, sessions: &[Session]) -> Result<Vec<LossReport>> {
        if sessions.is_empty() {
            return Err(Error::InvalidArgument("no training sessions".into()));
        }
        let mut losses = Vec::with_capacity(self.cfg.steps * 3);
        for _ in 0..self.cfg.steps {
            let idx = self.next_batch(sessions.len());
            let batch: Vec<&Session> = idx.iter().map(|&i| &sessions[i]).collect();
            losses.extend(self.step(&batch)?);
        }
        Ok(losses)
    }

    /// One optimization step on a batch; every model of the method is updated once.
    pub fn step(&mut self, sessions: &[&Session]) -> Result<Vec<LossReport>> {
        let b = Batch::new(sessions)?;
        b.check_clicks(sessions)?;
        let clip = self.cfg.weight_clip_max;
        let step = self.step;
        let mut out = Vec::with_capacity(3);
        let mut record = |name: &'static str, value: f64| -> Result<()> {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss at step {step}")));
            }
            out.push(LossReport { step, name, value });
            Ok(())
        };
        let clicks: Vec<T> = b.click_targets();

        match self.cfg.method {
            Method::Naive => {
                let h = self.models.pointwise.as_mut().expect("naive has a pointwise ranker");
                let v = pointwise_pass(h, &b)?.finish(&b.segs, &clicks, h)?;
                record("ranking", v)?;
            }
            Method::Ipw => {
                let h = self.models.pointwise.as_mut().expect("ipw has a pointwise ranker");
                let fixed = self.fixed_weights.as_ref().expect("ipw weights");
                let w: Vec<T> = b.positions.iter().map(|&p| fixed[p - 1]).collect();
                let v = pointwise_pass(h, &b)?.finish(&b.segs, &mul(&clicks, &w), h)?;
                record("ipw", v)?;
            }
            Method::Dla | Method::Cdla | Method::CdlaLd => {
                let g = self.models.propensity.as_mut().expect("dual methods have a propensity model");
                let ipw = g.inverse_weights(&b.positions, clip);
                let gp = propensity_pass(g, &b)?;
                let (ranker_pass, listwise) = if self.cfg.method == Method::Dla {
                    let h = self.models.pointwise.as_ref().expect("dla has a pointwise ranker");
                    (pointwise_pass(h, &b)?, false)
                } else {
                    let f = self.models.listwise.as_ref().expect("cdla has a listwise ranker");
                    (listwise_pass(f, &b)?, true)
                };
                let scores = ranker_pass.values();
                let irw = segment_relevance_weights(&scores, &b.segs, clip);

                let v = if listwise {
                    let f = self.models.listwise.as_mut().expect("listwise ranker");
                    ranker_pass.finish(&b.segs, &mul(&clicks, &ipw), f)?
                } else {
                    let h = self.models.pointwise.as_mut().expect("pointwise ranker");
                    ranker_pass.finish(&b.segs, &mul(&clicks, &ipw), h)?
                };
                record("ipw", v)?;
                let v = gp.finish(&b.segs, &mul(&clicks, &irw), g)?;
                record("irw", v)?;

                if self.cfg.method == Method::CdlaLd {
                    // teacher scores enter only as constant targets
                    let h = self.models.pointwise.as_mut().expect("cdla_ld has a student");
                    let targets = segment_softmax(&scores, &b.segs);
                    let v = pointwise_pass(h, &b)?.finish(&b.segs, &targets, h)?;
                    record("distill", v)?;
                }
            }
            Method::CDlaLd => {
                let f = self.models.listwise.as_mut().expect("c_dla_ld has a listwise ranker");
                let fp = listwise_pass(f, &b)?;
                let soft = segment_softmax(&fp.values(), &b.segs);
                let v = fp.finish(&b.segs, &clicks, f)?;
                record("click_fit", v)?;
                if step < self.cfg.teacher_warmup_steps {
                    if let Some(opt) = self.opt_listwise.as_mut() {
                        opt.set_learning_rate(
                            self.cfg.learning_rate * self.cfg.lr_schedule.factor(step, self.cfg.steps),
                        );
                        opt.step(f.params_mut())?;
                    }
                    self.step += 1;
                    return Ok(out);
                }

                let g = self.models.propensity.as_mut().expect("propensity model");
                let h = self.models.pointwise.as_mut().expect("pointwise ranker");
                let ipw = g.inverse_weights(&b.positions, clip);
                let gp = propensity_pass(g, &b)?;
                let hp = pointwise_pass(h, &b)?;
                let irw = segment_relevance_weights(&hp.values(), &b.segs, clip);
                let v = hp.finish(&b.segs, &mul(&soft, &ipw), h)?;
                record("ipw", v)?;
                let v = gp.finish(&b.segs, &mul(&soft, &irw), g)?;
                record("irw", v)?;
            }
        }

        let factor = self.cfg.lr_schedule.factor(step, self.cfg.steps);
        let ranker_lr = self.cfg.learning_rate * factor;
        let propensity_lr = self.cfg.propensity_adam().learning_rate * factor;
        for opt in [self.opt_listwise.as_mut(), self.opt_pointwise.as_mut()].into_iter().flatten() {
            opt.set_learning_rate(ranker_lr);
        }
        if let Some(opt) = self.opt_propensity.as_mut() {
            opt.set_learning_rate(propensity_lr);
        }
        if let (Some(opt), Some(m)) = (self.opt_listwise.as_mut(), self.models.listwise.as_mut()) {
            opt.step(m.params_mut())?;
        }
        if let (Some(opt), Some(m)) = (self.opt_pointwise.as_mut(), self.models.pointwise.as_mut()) {
            opt.step(m.params_mut())?;
        }
        if let (Some(opt), Some(m)) = (self.opt_propensity.as_mut(), self.models.propensity.as_mut()) {
            opt.step(m.params_mut())?;
        }
        self.step += 1;
        Ok(out)
    }
}

/// Trains `cfg.method` on filtered, normalized sessions.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    sessions: &[Session],
    ipw_propensity: Option<&[f64]>,
) -> Result<(TrainedModels<T>, Vec<LossReport>)> {
    let mut trainer = Trainer::new(cfg.clone(), ipw_propensity)?;
    let losses = trainer.fit(sessions)?;
    Ok((trainer.into_models(), losses))
}
