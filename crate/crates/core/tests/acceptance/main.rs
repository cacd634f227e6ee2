//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines are
//! always printed.

mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use cdla_core::autodiff::{softmax, BoundParams, Graph, Segments, Tensor, Var};
use cdla_core::clicksim::{
    generate_annotated, ClickModelConfig, ClickSimulator, InitialRanker, SyntheticCorpusConfig,
    LOGGING_FEATURE,
};
use cdla_core::data::{filter_sessions, fit_and_apply_normalization, AnnotatedQuery, Session, NUM_FEATURES};
use cdla_core::metrics::{err_at_k, kendall_tau, ndcg_at_k, EvalReport, MetricKind};
use cdla_core::models::{features_tensor, ListwiseRanker, Model, PointwiseRanker, PropensityModel};
use cdla_core::pipeline::{Experiment, ExperimentConfig};
use cdla_core::training::{
    loss_distill, loss_ipw, loss_irw, loss_listwise_softmax, softmax_entropy, weighted_softmax_loss,
    LrSchedule, Method, TrainConfig, TrainedModels, Trainer,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oracles::{brute_force_err, brute_force_ndcg, central_difference, relative_error};

// Tolerances and thresholds.
const PROPENSITY_TOLERANCE: f64 = 0.1;
const MAX_PROPENSITY_STEPS: usize = 20_000;
const RUNTIME_LIMIT_SECS: f64 = 600.0;
const MIN_GAIN_OVER_NAIVE: f64 = 0.01;
const MIN_MEAN_KENDALL_TAU: f64 = 0.9;
const DISTILL_GAP: f64 = 1e-2;
const MIN_DISTILL_FRACTION: f64 = 0.9;
const GRAD_REL_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const GRAD_INSTANCES: u64 = 100;
const METRIC_TOLERANCE: f64 = 1e-9;
const METRIC_LISTS: usize = 1000;
const REDUCTION_TOLERANCE: f64 = 1e-12;

// Synthetic setup shared by the training criteria.
const TRAIN_QUERIES: usize = 1000;
const TEST_QUERIES: usize = 300;
const SESSIONS_PER_QUERY: usize = 50;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const STEPS: usize = 1000;
const NDCG10: usize = 3;

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u8, name: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome { id, name, pass, detail };
    print_outcome(&o);
    o
}

fn print_outcome(o: &Outcome) {
    println!(
        "{} [{}] {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail
    );
}

fn train_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        seed,
        batch_size: 90,
        steps: STEPS,
        learning_rate: 3e-3,
        propensity_learning_rate: Some(1e-2),
        propensity_weight_decay: Some(0.0),
        lr_schedule: LrSchedule::Linear,
        encoder_layers: 1,
        encoder_heads: 4,
        ..TrainConfig::default()
    }
}

fn click_config() -> ClickModelConfig {
    ClickModelConfig {
        gamma: 1.0,
        epsilon: 0.1,
        sessions_per_query: SESSIONS_PER_QUERY,
        seed: 11,
        initial_ranker: InitialRanker::Feature {
            column: LOGGING_FEATURE,
            noise: 3.0,
        },
        ..ClickModelConfig::default()
    }
}

fn rows_of(q: &AnnotatedQuery) -> Vec<[f64; NUM_FEATURES]> {
    q.docs.iter().map(|d| d.features).collect()
}

fn evaluate(models: &TrainedModels<f64>, test: &[AnnotatedQuery]) -> EvalReport {
    let ranker = models.eval_ranker().expect("evaluation ranker");
    EvalReport::evaluate(models.method.as_str(), test, |q| ranker.score_list(&rows_of(q)))
        .expect("evaluation")
}

struct Run {
    method: Method,
    models: TrainedModels<f64>,
    ndcg10: f64,
    secs: f64,
}

struct SyntheticExperiment {
    sessions: Vec<Session>,
    test: Vec<AnnotatedQuery>,
    simulate_secs: f64,
    runs: Vec<Run>,
    /// CDLA evaluated through the listwise teacher of each CDLA-LD run.
    cdla_ndcg10: Vec<f64>,
}

impl SyntheticExperiment {
    fn run() -> Self {
        let t = Instant::now();
        let train_q = generate_annotated(&SyntheticCorpusConfig {
            num_queries: TRAIN_QUERIES,
            seed: 5,
            ..SyntheticCorpusConfig::default()
        })
        .expect("train corpus");
        let test_q = generate_annotated(&SyntheticCorpusConfig {
            num_queries: TEST_QUERIES,
            seed: 6,
            prefix: "t".into(),
            ..SyntheticCorpusConfig::default()
        })
        .expect("test corpus");
        let mut sim = ClickSimulator::new(click_config()).expect("click config");
        let (raw, _) = sim.simulate_corpus(&train_q).expect("simulation");
        let filtered = filter_sessions(&raw);
        let (sessions, mut rest, _) =
            fit_and_apply_normalization(&filtered, &[&test_q]).expect("normalization");
        let test = rest.remove(0);
        let simulate_secs = t.elapsed().as_secs_f64();
        println!(
            "  simulated {} sessions, {} kept after filtering, in {simulate_secs:.1}s",
            raw.len(),
            sessions.len()
        );

        let mut runs = Vec::new();
        let mut cdla_ndcg10 = Vec::new();
        for method in [Method::Naive, Method::Dla, Method::CdlaLd] {
            for seed in SEEDS {
                let t = Instant::now();
                let mut trainer = Trainer::<f64>::new(train_config(method, seed), None).expect("trainer");
                trainer.fit(&sessions).expect("training");
                let models = trainer.into_models();
                let secs = t.elapsed().as_secs_f64();
                let ndcg10 = evaluate(&models, &test).mean(MetricKind::Ndcg, NDCG10);
                let mut line = format!("  {method} seed {seed}: ndcg@10 {ndcg10:.4} ({secs:.1}s)");
                if method == Method::CdlaLd {
                    let teacher = TrainedModels {
                        method: Method::Cdla,
                        listwise: models.listwise.clone(),
                        pointwise: None,
                        propensity: models.propensity.clone(),
                    };
                    let v = evaluate(&teacher, &test).mean(MetricKind::Ndcg, NDCG10);
                    line.push_str(&format!(", listwise teacher {v:.4}"));
                    cdla_ndcg10.push(v);
                }
                println!("{line}");
                runs.push(Run { method, models, ndcg10, secs });
            }
        }
        Self {
            sessions,
            test,
            simulate_secs,
            runs,
            cdla_ndcg10,
        }
    }

    fn runs_of(&self, m: Method) -> impl Iterator<Item = &Run> {
        self.runs.iter().filter(move |r| r.method == m)
    }

    fn mean_ndcg10(&self, m: Method) -> f64 {
        self.runs_of(m).map(|r| r.ndcg10).sum::<f64>() / SEEDS.len() as f64
    }
}

fn max_propensity_deviation(m: &PropensityModel<f64>) -> f64 {
    m.propensity()
        .normalized
        .iter()
        .enumerate()
        .map(|(i, v)| (v - 1.0 / (i + 1) as f64).abs())
        .fold(0.0, f64::max)
}

fn criterion_1(exp: &SyntheticExperiment) -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut slowest: f64 = 0.0;
    for m in [Method::Dla, Method::CdlaLd] {
        for r in exp.runs_of(m) {
            let d = max_propensity_deviation(r.models.propensity.as_ref().expect("propensity"));
            let e = worst.entry(m.as_str()).or_insert(0.0);
            *e = e.max(d);
            slowest = slowest.max(r.secs);
        }
    }
    let runtime = exp.simulate_secs + slowest;
    let pass = STEPS <= MAX_PROPENSITY_STEPS
        && worst.values().all(|&d| d <= PROPENSITY_TOLERANCE)
        && runtime <= RUNTIME_LIMIT_SECS;
    outcome(
        1,
        "propensity recovery",
        pass,
        format!(
            "max |learned - 1/i| over positions and 5 seeds: dla {:.4}, cdla_ld {:.4} (tol {PROPENSITY_TOLERANCE}); {STEPS} steps; simulate + slowest run {runtime:.0}s (limit {RUNTIME_LIMIT_SECS}s)",
            worst["dla"], worst["cdla_ld"]
        ),
    )
}

fn criterion_2(exp: &SyntheticExperiment) -> Outcome {
    let naive = exp.mean_ndcg10(Method::Naive);
    let dla = exp.mean_ndcg10(Method::Dla);
    let ld = exp.mean_ndcg10(Method::CdlaLd);
    let pass = dla > naive && ld >= dla && ld - naive >= MIN_GAIN_OVER_NAIVE;
    outcome(
        2,
        "debiasing gap",
        pass,
        format!(
            "mean ndcg@10 over 5 seeds: naive {naive:.4} < dla {dla:.4} <= cdla_ld {ld:.4}; cdla_ld - naive = {:.4} (min {MIN_GAIN_OVER_NAIVE})",
            ld - naive
        ),
    )
}

fn criterion_3(exp: &SyntheticExperiment) -> Outcome {
    let lengths: Vec<usize> = exp.test.iter().map(|q| q.docs.len()).collect();
    let other_lengths = lengths.iter().filter(|&&n| n != 10).count();
    let cdla = exp.cdla_ndcg10.iter().sum::<f64>() / exp.cdla_ndcg10.len() as f64;
    let ld = exp.mean_ndcg10(Method::CdlaLd);
    let pass = other_lengths > 0 && ld > cdla;
    outcome(
        3,
        "ablation ordering",
        pass,
        format!(
            "evaluation lists of length {}..={} ({other_lengths}/{} differ from 10); mean ndcg@10 cdla_ld {ld:.4} > cdla {cdla:.4}",
            lengths.iter().min().unwrap(),
            lengths.iter().max().unwrap(),
            lengths.len()
        ),
    )
}

/// Listwise scores of many lists, batched through one graph per chunk.
fn listwise_scores(f: &ListwiseRanker<f64>, sessions: &[Session]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(sessions.len());
    for chunk in sessions.chunks(256) {
        let rows: Vec<_> = chunk.iter().flat_map(|s| s.docs.iter().map(|d| d.features)).collect();
        let segs = Segments::from_lengths(&chunk.iter().map(Session::len).collect::<Vec<_>>());
        let mut g = Graph::new();
        let p = f.params().bind_frozen(&mut g).unwrap();
        let x = g.constant(features_tensor(&rows).unwrap()).unwrap();
        let s = f.forward(&mut g, &p, x, &segs).unwrap();
        let values = g.value(s).data();
        out.extend(segs.iter().map(|r| values[r].to_vec()));
    }
    out
}

fn criterion_4(exp: &SyntheticExperiment) -> Outcome {
    let mut taus = Vec::new();
    let mut close = 0usize;
    for r in exp.runs_of(Method::CdlaLd) {
        let f = r.models.listwise.as_ref().unwrap();
        let h = r.models.pointwise.as_ref().unwrap();
        let teacher = listwise_scores(f, &exp.sessions);
        for (s, ft) in exp.sessions.iter().zip(&teacher) {
            let rows: Vec<_> = s.docs.iter().map(|d| d.features).collect();
            let ht = h.score_batch(&rows).unwrap();
            taus.push(kendall_tau(ft, &ht).unwrap());
            let gap = loss_distill(ft, &ht).unwrap() - softmax_entropy(ft);
            if gap <= DISTILL_GAP {
                close += 1;
            }
        }
    }
    let mean_tau = taus.iter().sum::<f64>() / taus.len() as f64;
    let fraction = close as f64 / taus.len() as f64;
    let pass = mean_tau >= MIN_MEAN_KENDALL_TAU && fraction >= MIN_DISTILL_FRACTION;
    outcome(
        4,
        "distillation fidelity",
        pass,
        format!(
            "{} training lists x 5 seeds: mean kendall tau {mean_tau:.4} (min {MIN_MEAN_KENDALL_TAU}); distill - entropy <= {DISTILL_GAP} on {:.1}% (min {:.0}%)",
            exp.sessions.len(),
            100.0 * fraction,
            100.0 * MIN_DISTILL_FRACTION
        ),
    )
}

/// Random list layout, clicks and positive loss weights for one instance.
struct Instance {
    lengths: Vec<usize>,
    rows: Vec<[f64; NUM_FEATURES]>,
    positions: Vec<usize>,
    weights: Vec<f64>,
}

fn instance(rng: &mut ChaCha8Rng, max_lists: usize) -> Instance {
    let lists = rng.random_range(1..=max_lists);
    let lengths: Vec<usize> = (0..lists).map(|_| rng.random_range(1..=10)).collect();
    let mut rows = Vec::new();
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    for &n in &lengths {
        let mut pos: Vec<usize> = (1..=10).collect();
        pos.shuffle(rng);
        positions.extend_from_slice(&pos[..n]);
        let first = weights.len();
        for _ in 0..n {
            rows.push(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
            let clicked = rng.random::<f64>() < 0.4;
            weights.push(if clicked { rng.random_range(0.1..3.0) } else { 0.0 });
        }
        let pick = first + rng.random_range(0..n);
        weights[pick] = rng.random_range(0.1..3.0);
    }
    Instance {
        lengths,
        rows,
        positions,
        weights,
    }
}

/// Largest relative error between the tape gradient of `loss` and central
/// differences, over sampled parameter coordinates and (when `input` is set)
/// sampled input coordinates.
fn audit_model<M: Model<f64> + Clone>(
    model: &M,
    inst: &Instance,
    rng: &mut ChaCha8Rng,
    input: bool,
    forward: impl Fn(&M, &mut Graph<f64>, &BoundParams, Option<Var>) -> Var,
) -> f64 {
    let segs = Segments::from_lengths(&inst.lengths);
    let x0: Vec<f64> = inst.rows.iter().flatten().copied().collect();
    let eval = |m: &M, x: &[f64], trainable: bool| -> (f64, Graph<f64>, BoundParams, Option<Var>) {
        let mut g = Graph::new();
        let p = if trainable { m.params().bind(&mut g) } else { m.params().bind_frozen(&mut g) }.unwrap();
        let xv = input.then(|| {
            let t = Tensor::matrix(inst.rows.len(), NUM_FEATURES, x.to_vec()).unwrap();
            if trainable { g.param(t) } else { g.constant(t) }.unwrap()
        });
        let s = forward(m, &mut g, &p, xv);
        let l = weighted_softmax_loss(&mut g, s, &segs, &inst.weights).unwrap();
        let v = g.value(l).data()[0];
        if trainable {
            g.backward(l).unwrap();
        }
        (v, g, p, xv)
    };

    let (_, g, p, xv) = eval(model, &x0, true);
    let mut with_grads = model.clone();
    with_grads.params_mut().collect_grads(&g, &p);
    let mut worst: f64 = 0.0;

    let n_params = model.params().len();
    for _ in 0..12 {
        let pi = rng.random_range(0..n_params);
        let param = with_grads.params().iter().nth(pi).unwrap();
        let j = rng.random_range(0..param.value.len());
        let analytic = param.grad.as_ref().unwrap()[j];
        let base = model.params().iter().nth(pi).unwrap().value.data().to_vec();
        let numeric = central_difference(&base, j, FD_STEP, |v| {
            let mut m = model.clone();
            let target = m.params_mut().iter_mut().nth(pi).unwrap();
            target.value.data_mut().copy_from_slice(v);
            eval(&m, &x0, false).0
        });
        worst = worst.max(relative_error(analytic, numeric));
    }
    if let Some(xv) = xv {
        let gx = g.grad(xv).unwrap().to_vec();
        for _ in 0..6 {
            let j = rng.random_range(0..x0.len());
            let numeric = central_difference(&x0, j, FD_STEP, |x| eval(model, x, false).0);
            worst = worst.max(relative_error(gx[j], numeric));
        }
    }
    worst
}

/// Tape gradient of the batched loss over one list versus central
/// differences of the standalone per-list loss function.
fn audit_loss(scores: &[f64], weights: &[f64], standalone: impl Fn(&[f64]) -> f64) -> f64 {
    let mut g = Graph::new();
    let s = g.param(Tensor::vector(scores.to_vec())).unwrap();
    let l = weighted_softmax_loss(&mut g, s, &Segments::single(scores.len()), weights).unwrap();
    g.backward(l).unwrap();
    let analytic = g.grad(s).unwrap().to_vec();
    (0..scores.len())
        .map(|i| relative_error(analytic[i], central_difference(scores, i, FD_STEP, &standalone)))
        .fold(0.0, f64::max)
}

fn criterion_5() -> Outcome {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    let mut stationary: f64 = 0.0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);

        let inst = instance(&mut rng, 1);
        let h = PointwiseRanker::<f64>::new(&mut rng);
        note("pointwise ranker", audit_model(&h, &inst, &mut rng, true, |m, g, p, x| {
            m.forward(g, p, x.unwrap()).unwrap()
        }));

        let inst = instance(&mut rng, 3);
        let segs = Segments::from_lengths(&inst.lengths);
        let f = ListwiseRanker::<f64>::new(2, 4, &mut rng).unwrap();
        note("listwise ranker", audit_model(&f, &inst, &mut rng, true, |m, g, p, x| {
            m.forward(g, p, x.unwrap(), &segs).unwrap()
        }));

        let inst = instance(&mut rng, 3);
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gm = PropensityModel::from_logits(&logits).unwrap();
        note("propensity model", audit_model(&gm, &inst, &mut rng, false, |m, g, p, _| {
            m.forward(g, p, &inst.positions).unwrap()
        }));

        let n = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut clicks: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
        clicks[rng.random_range(0..n)] = true;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let targets: Vec<f64> = clicks.iter().map(|&c| f64::from(u8::from(c))).collect();
        let masked: Vec<f64> = clicks.iter().zip(&w).map(|(&c, &x)| if c { x } else { 0.0 }).collect();
        let teacher: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();

        note("loss_listwise_softmax", audit_loss(&scores, &targets, |s| {
            loss_listwise_softmax(s, &targets).unwrap()
        }));
        note("loss_ipw", audit_loss(&scores, &masked, |s| loss_ipw(s, &clicks, &w).unwrap()));
        note("loss_irw", audit_loss(&scores, &masked, |s| loss_irw(s, &clicks, &w).unwrap()));
        note("loss_distill", audit_loss(&scores, &softmax(&teacher), |s| {
            loss_distill(&teacher, s).unwrap()
        }));
        for j in 0..n {
            let d = central_difference(&teacher, j, FD_STEP, |hs| loss_distill(&teacher, hs).unwrap());
            stationary = stationary.max(d.abs());
        }
    }
    let pass = worst.values().all(|&e| e < GRAD_REL_TOLERANCE) && stationary < 1e-8;
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        5,
        "gradient audit",
        pass,
        format!(
            "{GRAD_INSTANCES} instances each, worst relative error: {detail} (tol {GRAD_REL_TOLERANCE:.0e}); |d distill/dh| at h=f max {stationary:.1e} (tol 1e-8)"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..METRIC_LISTS {
        let n = rng.random_range(1..=7);
        let grades: Vec<u8> = (0..n).map(|_| rng.random_range(0..=4)).collect();
        for k in [1, 3, 5, 10] {
            worst = worst.max((ndcg_at_k(&grades, k) - brute_force_ndcg(&grades, k)).abs());
            worst = worst.max((err_at_k(&grades, k) - brute_force_err(&grades, k)).abs());
        }
    }
    let examples = [
        (format!("{:.4}", ndcg_at_k(&[2, 3, 0], 3)), "0.8340"),
        (format!("{:.4}", err_at_k(&[4], 1)), "0.9375"),
        (format!("{:.4}", err_at_k(&[4, 4], 2)), "0.9668"),
    ];
    let examples_ok = examples.iter().all(|(got, want)| got == want);
    let shown: Vec<String> = examples.iter().map(|(g, w)| format!("{g}/{w}")).collect();
    outcome(
        6,
        "metric oracles",
        worst <= METRIC_TOLERANCE && examples_ok,
        format!(
            "{METRIC_LISTS} random lists, max |library - brute force| {worst:.1e} (tol {METRIC_TOLERANCE:.0e}); examples got/expected {}",
            shown.join(", ")
        ),
    )
}

fn small_sessions(queries: usize, per_query: usize, seed: u64) -> Vec<Session> {
    let q = generate_annotated(&SyntheticCorpusConfig {
        num_queries: queries,
        seed,
        ..SyntheticCorpusConfig::default()
    })
    .unwrap();
    let mut sim = ClickSimulator::new(ClickModelConfig {
        sessions_per_query: per_query,
        seed,
        ..click_config()
    })
    .unwrap();
    let raw = filter_sessions(&sim.simulate_corpus(&q).unwrap().0);
    fit_and_apply_normalization(&raw, &[]).unwrap().0
}

fn param_bits<M: Model<f64>>(m: &M) -> Vec<u64> {
    m.params()
        .iter()
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn criterion_7() -> Outcome {
    let sessions = small_sessions(60, 10, 7);
    let mut naive = Trainer::<f64>::new(train_config(Method::Naive, 3), None).unwrap();
    let clipped = TrainConfig {
        weight_clip_max: 1.0,
        ..train_config(Method::Dla, 3)
    };
    let mut dla = Trainer::<f64>::new(clipped, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let steps = 50;
    let mut identical_steps = 0;
    for _ in 0..steps {
        let batch: Vec<&Session> = (0..30).map(|_| &sessions[rng.random_range(0..sessions.len())]).collect();
        let a = naive.step(&batch).unwrap();
        let b = dla.step(&batch).unwrap();
        let same_loss = a[0].value.to_bits() == b.iter().find(|l| l.name == "ipw").unwrap().value.to_bits();
        let same_params = param_bits(naive.models().pointwise.as_ref().unwrap())
            == param_bits(dla.models().pointwise.as_ref().unwrap());
        if same_loss && same_params {
            identical_steps += 1;
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut clicks: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
        clicks[rng.random_range(0..n)] = true;
        let targets: Vec<f64> = clicks.iter().map(|&c| f64::from(u8::from(c))).collect();
        let ones = vec![1.0; n];
        let reference = loss_listwise_softmax(&scores, &targets).unwrap();
        worst = worst.max((loss_ipw(&scores, &clicks, &ones).unwrap() - reference).abs());
        worst = worst.max((loss_irw(&scores, &clicks, &ones).unwrap() - reference).abs());
    }
    outcome(
        7,
        "reduction identities",
        identical_steps == steps && worst <= REDUCTION_TOLERANCE,
        format!(
            "dla with weight_clip_max=1 bit-identical to naive (loss and parameters) on {identical_steps}/{steps} steps; unit-weight ipw/irw vs listwise softmax max diff {worst:.1e} (tol {REDUCTION_TOLERANCE:.0e})"
        ),
    )
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(rel, fs::read(&path).unwrap());
        }
    }
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.generate.train.num_queries = 40;
    cfg.generate.test.num_queries = 15;
    cfg.clicks = ClickModelConfig {
        sessions_per_query: 8,
        ..click_config()
    };
    cfg.train = TrainConfig {
        steps: 25,
        batch_size: 10,
        ipw_propensity_path: Some("propensity.txt".into()),
        ..train_config(Method::Naive, 0)
    };
    cfg.experiment.methods = Method::ALL.to_vec();
    cfg.experiment.seeds = vec![0, 1];
    let text = cfg.to_toml();

    let run = || -> BTreeMap<String, Vec<u8>> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experiment.toml");
        fs::write(&path, &text).unwrap();
        let inverse: Vec<String> = (1..=10).map(|i| (1.0 / i as f64).to_string()).collect();
        fs::write(dir.path().join("propensity.txt"), inverse.join(" ")).unwrap();
        let exp = Experiment::load(&path).unwrap();
        exp.generate().unwrap();
        exp.simulate().unwrap();
        exp.run().unwrap();
        let mut files = BTreeMap::new();
        collect_files(&exp.out_dir(), &exp.out_dir(), &mut files);
        files
    };
    let a = run();
    let b = run();
    let reports = a.keys().filter(|k| k.ends_with("report.tsv")).count();
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let pass = a.len() == b.len() && differing.is_empty() && reports == 12;
    outcome(
        8,
        "determinism",
        pass,
        format!(
            "generate -> simulate -> train -> evaluate twice for 6 methods x 2 seeds: {} files compared, {} differ, {reports} per-query reports",
            a.len(),
            differing.len()
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = vec![criterion_5(), criterion_6(), criterion_7(), criterion_8()];
    let exp = SyntheticExperiment::run();
    results.extend([criterion_1(&exp), criterion_2(&exp), criterion_3(&exp), criterion_4(&exp)]);
    results.sort_by_key(|o| o.id);

    println!("\nacceptance summary ({:.0}s):", start.elapsed().as_secs_f64());
    for o in &results {
        print_outcome(o);
    }
    let failed = results.iter().filter(|o| !o.pass).map(|o| o.name).collect::<Vec<_>>();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
