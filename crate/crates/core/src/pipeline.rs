//! End-to-end experiment driver: corpus generation, click simulation,
//! training, evaluation and reporting, all configured by one TOML file.
//!
//! Output layout under `experiment.out`:
//!
//! ```text
//! sessions.txt  ground_truth.txt  summary.tsv
//! <method>/seed-<s>/{listwise,pointwise,propensity}.ckpt
//! <method>/seed-<s>/{loss.tsv,feature_stats.txt,report.tsv,report.txt,propensity.tsv}
//! ```
//!
//! Every written file starts with a `# cdla-core <version> config=<sha256>`
//! line, and every write goes through a temporary file and a rename.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clicksim::{
    generate_annotated, load_vector, ClickModelConfig, ClickSimulator, SyntheticCorpusConfig,
};
use crate::data::{
    filter_sessions, format_annotated, format_session, load_annotated, load_sessions,
    AnnotatedQuery, FeatureStats, Session,
};
use crate::error::{Error, Result};
use crate::metrics::{
    compare, format_comparison, format_propensity_report, mean_ctr, propensity_report,
    EvalReport, MetricKind, CUTOFFS,
};
use crate::models::{
    load_checkpoint, save_checkpoint, ListwiseRanker, PointwiseRanker, PropensityModel,
};
use crate::training::{format_loss_tsv, Method, TrainConfig, TrainedModels, Trainer};
use crate::util::write_atomic;

/// Dataset locations. Relative paths are resolved against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Annotated queries clicks are simulated on.
    pub train: PathBuf,
    /// Annotated queries used for evaluation.
    pub test: PathBuf,
    /// Session file; defaults to `<out>/sessions.txt`.
    pub sessions: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: "data/train.txt".into(),
            test: "data/test.txt".into(),
            sessions: None,
        }
    }
}

/// Synthetic corpora written by [`Experiment::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub train: SyntheticCorpusConfig,
    pub test: SyntheticCorpusConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            train: SyntheticCorpusConfig::default(),
            test: SyntheticCorpusConfig {
                num_queries: 300,
                seed: 1,
                prefix: "t".into(),
                ..SyntheticCorpusConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    /// Training seeds; every method is trained once per seed.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Naive, Method::Dla, Method::Cdla, Method::CdlaLd],
            seeds: vec![0],
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub generate: GenerateConfig,
    pub clicks: ClickModelConfig,
    /// Training settings shared by every method; `method` and `seed` are
    /// replaced per run.
    pub train: TrainConfig,
    pub experiment: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if self.experiment.methods.is_empty() {
            return Err(Error::Config("experiment.methods must not be empty".into()));
        }
        self.clicks.validate()?;
        self.train.validate()
    }

    /// Replaces the seed list with a single seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.experiment.seeds = vec![seed];
    }

    /// SHA-256 of the canonical serialization; comments and formatting of
    /// the source file do not affect it, and neither does the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.experiment.out = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }
}

/// A loaded config plus the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    base: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, base: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            base: base.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = ExperimentConfig::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base)
    }

    /// Replaces the output directory (resolved like the config's own paths).
    pub fn set_out(&mut self, out: impl Into<PathBuf>) {
        self.config.experiment.out = out.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// First line of every output file (without the comment marker).
    pub fn header(&self) -> String {
        format!("cdla-core {} config={}", crate::VERSION, self.config.hash())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.experiment.out)
    }

    pub fn sessions_path(&self) -> PathBuf {
        match &self.config.data.sessions {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("sessions.txt"),
        }
    }

    pub fn ground_truth_path(&self) -> PathBuf {
        self.out_dir().join("ground_truth.txt")
    }

    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.out_dir().join(method.as_str()).join(format!("seed-{seed}"))
    }

    fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            seed,
            ipw_propensity_path: self
                .config
                .train
                .ipw_propensity_path
                .as_ref()
                .map(|p| self.resolve(p)),
            ..self.config.train.clone()
        }
    }

    fn comment(&self, extra: &str) -> String {
        let mut s = format!("# {}\n", self.header());
        for line in extra.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s
    }

    /// Writes the synthetic train and test corpora to `data.train` / `data.test`.
    pub fn generate(&self) -> Result<()> {
        let g = &self.config.generate;
        for (corpus, path) in [(&g.train, &self.config.data.train), (&g.test, &self.config.data.test)] {
            let queries = generate_annotated(corpus)?;
            let text = self.comment("") + &format_annotated(&queries);
            write_atomic(&self.resolve(path), text.as_bytes())?;
        }
        Ok(())
    }

    /// Simulates click sessions on the training corpus; writes the session
    /// file and the ground-truth propensities.
    pub fn simulate(&self) -> Result<Vec<Session>> {
        let queries = load_annotated(self.resolve(&self.config.data.train))?;
        let mut sim = ClickSimulator::new(self.config.clicks.clone())?;
        let (sessions, truth) = sim.simulate_corpus(&queries)?;
        let mut text = self.comment("");
        for s in &sessions {
            text.push_str(&format_session(s));
            text.push('\n');
        }
        write_atomic(&self.sessions_path(), text.as_bytes())?;
        write_atomic(&self.ground_truth_path(), truth.to_text(&self.header()).as_bytes())?;
        Ok(sessions)
    }

    /// Filtered, normalized training sessions and the fitted statistics.
    pub fn training_sessions(&self) -> Result<(Vec<Session>, FeatureStats)> {
        let raw = load_sessions(self.sessions_path())?;
        let filtered = filter_sessions(&raw);
        if filtered.is_empty() {
            return Err(Error::Config(format!(
                "no session in {} survives filtering",
                self.sessions_path().display()
            )));
        }
        let stats = FeatureStats::fit(&filtered)?;
        Ok((stats.normalize_sessions(&filtered), stats))
    }

    /// Trains one method with one seed and writes its checkpoints, loss
    /// curve and feature statistics.
    pub fn train(&self, method: Method, seed: u64) -> Result<TrainedModels<f64>> {
        let (sessions, stats) = self.training_sessions()?;
        self.train_on(method, seed, &sessions, &stats)
    }

    fn train_on(
        &self,
        method: Method,
        seed: u64,
        sessions: &[Session],
        stats: &FeatureStats,
    ) -> Result<TrainedModels<f64>> {
        let cfg = self.train_config(method, seed);
        let ipw = match (&cfg.ipw_propensity_path, method) {
            (Some(p), Method::Ipw) => Some(load_vector(p)?),
            _ => None,
        };
        let mut trainer = Trainer::<f64>::new(cfg, ipw.as_deref())?;
        let losses = trainer.fit(sessions)?;
        let models = trainer.into_models();

        let dir = self.run_dir(method, seed);
        let header = self.header();
        if let Some(m) = &models.listwise {
            save_checkpoint(m, dir.join("listwise.ckpt"), &header)?;
        }
        if let Some(m) = &models.pointwise {
            save_checkpoint(m, dir.join("pointwise.ckpt"), &header)?;
        }
        if let Some(m) = &models.propensity {
            save_checkpoint(m, dir.join("propensity.ckpt"), &header)?;
        }
        let loss_text = self.comment("") + &format_loss_tsv(&losses);
        write_atomic(&dir.join("loss.tsv"), loss_text.as_bytes())?;
        let stats_text = self.comment("") + &stats.to_text();
        write_atomic(&dir.join("feature_stats.txt"), stats_text.as_bytes())?;
        Ok(models)
    }

    /// Loads the checkpoints of a finished run.
    pub fn load_models(&self, method: Method, seed: u64) -> Result<TrainedModels<f64>> {
        let dir = self.run_dir(method, seed);
        let listwise = if method.uses_listwise() {
            Some(ListwiseRanker::from_checkpoint(&load_checkpoint(dir.join("listwise.ckpt"))?)?)
        } else {
            None
        };
        let pointwise = if method.uses_pointwise() {
            Some(PointwiseRanker::from_checkpoint(&load_checkpoint(dir.join("pointwise.ckpt"))?)?)
        } else {
            None
        };
        let propensity = if method.uses_propensity() {
            Some(PropensityModel::from_checkpoint(&load_checkpoint(dir.join("propensity.ckpt"))?)?)
        } else {
            None
        };
        Ok(TrainedModels {
            method,
            listwise,
            pointwise,
            propensity,
        })
    }

    fn load_stats(&self, method: Method, seed: u64) -> Result<FeatureStats> {
        let path = self.run_dir(method, seed).join("feature_stats.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        FeatureStats::from_text(&text, &path.display().to_string())
    }

    /// Evaluates a finished run on the test corpus and writes
    /// `report.tsv` and `report.txt`.
    pub fn evaluate(&self, method: Method, seed: u64) -> Result<EvalReport> {
        let test = load_annotated(self.resolve(&self.config.data.test))?;
        let models = self.load_models(method, seed)?;
        let stats = self.load_stats(method, seed)?;
        self.evaluate_models(&models, seed, &stats.normalize_queries(&test))
    }

    fn evaluate_models(
        &self,
        models: &TrainedModels<f64>,
        seed: u64,
        test: &[AnnotatedQuery],
    ) -> Result<EvalReport> {
        let ranker = models.eval_ranker()?;
        let report = EvalReport::evaluate(models.method.as_str(), test, |q| {
            let rows: Vec<_> = q.docs.iter().map(|d| d.features).collect();
            ranker.score_list(&rows)
        })?;
        let dir = self.run_dir(models.method, seed);
        let header = format!("{}\nseed={seed}", self.header());
        write_atomic(&dir.join("report.tsv"), report.to_tsv(&header).as_bytes())?;
        let text = self.comment(&format!("seed={seed}")) + &report.to_structured_text(None);
        write_atomic(&dir.join("report.txt"), text.as_bytes())?;
        Ok(report)
    }

    /// Learned normalized propensities of a finished run next to the
    /// simulator's truth and the raw click-through rates.
    pub fn propensity_report(&self, method: Method, seed: u64) -> Result<String> {
        if !method.uses_propensity() {
            return Err(Error::Config(format!("{method} learns no propensity model")));
        }
        let models = self.load_models(method, seed)?;
        let learned = models
            .propensity
            .as_ref()
            .expect("loaded for propensity methods")
            .propensity();
        let truth_path = self.ground_truth_path();
        let truth = if truth_path.exists() {
            Some(load_vector(&truth_path)?)
        } else {
            None
        };
        let sessions_path = self.sessions_path();
        let ctr = if sessions_path.exists() {
            Some(mean_ctr(&filter_sessions(&load_sessions(&sessions_path)?)))
        } else {
            None
        };
        let rows = propensity_report(&learned, truth.as_deref(), ctr.as_deref())?;
        let text = format_propensity_report(&rows, &format!("{}\nmethod={method} seed={seed}", self.header()));
        write_atomic(&self.run_dir(method, seed).join("propensity.tsv"), text.as_bytes())?;
        Ok(text)
    }

    /// Trains and evaluates every configured method and seed, then writes
    /// `summary.tsv`. Simulates first when the session file is missing.
    pub fn run(&self) -> Result<Vec<EvalReport>> {
        if !self.sessions_path().exists() {
            self.simulate()?;
        }
        let (sessions, stats) = self.training_sessions()?;
        let test = stats.normalize_queries(&load_annotated(self.resolve(&self.config.data.test))?);
        let mut reports = Vec::new();
        for &method in &self.config.experiment.methods {
            for &seed in &self.config.experiment.seeds {
                let models = self.train_on(method, seed, &sessions, &stats)?;
                reports.push(self.evaluate_models(&models, seed, &test)?);
                if method.uses_propensity() {
                    self.propensity_report(method, seed)?;
                }
            }
        }
        write_atomic(
            &self.out_dir().join("summary.tsv"),
            self.summary(&reports).as_bytes(),
        )?;
        Ok(reports)
    }

    /// Per-method mean and population standard deviation over seeds of
    /// every aggregate metric, followed by the per-seed values.
    pub fn summary(&self, reports: &[EvalReport]) -> String {
        let seeds = &self.config.experiment.seeds;
        let mut out = self.comment("");
        out.push_str("method\tmetric\tk\tmean\tstd");
        for s in seeds {
            let _ = write!(out, "\tseed-{s}");
        }
        out.push('\n');
        for chunk in reports.chunks(seeds.len()) {
            for metric in [MetricKind::Ndcg, MetricKind::Err] {
                for (ci, k) in CUTOFFS.iter().enumerate() {
                    let vals: Vec<f64> = chunk.iter().map(|r| r.mean(metric, ci)).collect();
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let _ = write!(
                        out,
                        "{}\t{}\t{k}\t{mean}\t{}",
                        chunk[0].method,
                        metric.as_str(),
                        var.sqrt()
                    );
                    for v in vals {
                        let _ = write!(out, "\t{v}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Significance table of two report files (`report.tsv` layout).
pub fn compare_report_files(a: &Path, b: &Path) -> Result<String> {
    let load = |p: &Path| -> Result<EvalReport> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        EvalReport::from_tsv(&text, &p.display().to_string())
    };
    let (ra, rb) = (load(a)?, load(b)?);
    let rows = compare(&ra, &rb)?;
    let header = format!("cdla-core {}\na={}\nb={}", crate::VERSION, a.display(), b.display());
    Ok(format_comparison(&ra, &rb, &rows, &header))
}
