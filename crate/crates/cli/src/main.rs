use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cdla_core::pipeline::{compare_report_files, Experiment};
use cdla_core::training::Method;
use clap::{Args, Parser, Subcommand};

/// Unbiased learning-to-rank experiments: click simulation, training,
/// evaluation and reporting.
#[derive(Debug, Parser)]
#[command(name = "cdla", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `experiment.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single training seed; overrides `experiment.seeds`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Restrict to one method (default: every method in the config).
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic annotated train/test corpora to the configured paths.
    Generate(Common),
    /// Simulate click sessions and write the ground-truth propensities.
    Simulate(Common),
    /// Train models and write checkpoints and loss curves.
    Train(RunArgs),
    /// Evaluate trained models on the test corpus.
    Evaluate(RunArgs),
    /// Learned propensities against ground truth and click-through rates.
    PropensityReport(RunArgs),
    /// Simulate if needed, then train and evaluate every method and seed.
    Run(Common),
    /// Paired significance table of two per-query report files.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(c: &Common) -> Result<Experiment> {
    let mut exp = Experiment::load(&c.config)
        .with_context(|| format!("loading config {}", c.config.display()))?;
    if let Some(out) = &c.out {
        // command-line paths are relative to the working directory
        let out = std::env::current_dir()?.join(out);
        exp.set_out(out);
    }
    if let Some(seed) = c.seed {
        exp.config.override_seed(seed);
    }
    Ok(exp)
}

fn runs(exp: &Experiment, method: Option<Method>) -> Vec<(Method, u64)> {
    let methods = method.map_or_else(|| exp.config.experiment.methods.clone(), |m| vec![m]);
    methods
        .into_iter()
        .flat_map(|m| exp.config.experiment.seeds.iter().map(move |&s| (m, s)))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let exp = experiment(&c)?;
            exp.generate()?;
            println!("wrote {} and {}", exp.resolve(&exp.config.data.train).display(), exp.resolve(&exp.config.data.test).display());
        }
        Command::Simulate(c) => {
            let exp = experiment(&c)?;
            let sessions = exp.simulate()?;
            println!("wrote {} sessions to {}", sessions.len(), exp.sessions_path().display());
        }
        Command::Train(a) => {
            let exp = experiment(&a.common)?;
            for (m, s) in runs(&exp, a.method) {
                exp.train(m, s)?;
                println!("trained {m} seed {s} -> {}", exp.run_dir(m, s).display());
            }
        }
        Command::Evaluate(a) => {
            let exp = experiment(&a.common)?;
            for (m, s) in runs(&exp, a.method) {
                let report = exp.evaluate(m, s)?;
                print!("{}", report.to_structured_text(None));
            }
        }
        Command::PropensityReport(a) => {
            let exp = experiment(&a.common)?;
            for (m, s) in runs(&exp, a.method).into_iter().filter(|(m, _)| m.uses_propensity()) {
                print!("{}", exp.propensity_report(m, s)?);
            }
        }
        Command::Run(c) => {
            let exp = experiment(&c)?;
            exp.run()?;
            let summary = exp.out_dir().join("summary.tsv");
            print!("{}", std::fs::read_to_string(&summary)?);
        }
        Command::Compare { report_a, report_b, out } => {
            let table = compare_report_files(&report_a, &report_b)?;
            if let Some(out) = out {
                write_file(&out, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

/// `error kind=<kind>: <message>` followed by the cause chain.
fn report_error(e: &anyhow::Error) {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<cdla_core::Error>())
        .map_or("other", cdla_core::Error::kind);
    eprintln!("error kind={kind}: {e}");
    let mut shown = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !shown.contains(&text) {
            eprintln!("  caused by: {text}");
        }
        shown = text;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
