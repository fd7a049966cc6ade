//! Command-line driver for the speaker-normalized unit discovery experiment.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use aud_core::pipeline::{
    build_report, collect_metrics, Condition, Experiment, ExperimentConfig, RunOptions, Selection, StageStatus,
};

#[derive(Parser)]
#[command(name = "aud", version, about = "Speaker normalization and acoustic unit discovery")]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Select {
    /// Restrict to these seeds (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Restrict to these conditions: clean, rec, vc.
    #[arg(long, value_delimiter = ',')]
    condition: Vec<Condition>,
    /// Restrict to these target corpora.
    #[arg(long, value_delimiter = ',')]
    corpus: Vec<String>,
}

impl Select {
    fn selection(&self) -> Selection {
        fn some<T: Clone>(v: &[T]) -> Option<Vec<T>> {
            (!v.is_empty()).then(|| v.to_vec())
        }
        Selection {
            seeds: some(&self.seed),
            targets: some(&self.corpus),
            conditions: some(&self.condition),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate corpora and cache FVAE training features.
    Ingest,
    /// Train the multilingual FVAE for each seed.
    TrainVc(Select),
    /// Extract style embeddings of each target corpus.
    ExtractStyles(Select),
    /// Select the medoid style of each target corpus.
    Medoid(Select),
    /// Convert target corpora for the rec and vc conditions.
    Convert(Select),
    /// Pretrain and train the HMM-VAE on each condition.
    TrainAud(Select),
    /// Decode unit transcriptions.
    Decode(Select),
    /// Score unit transcriptions against the references.
    Evaluate(Select),
    /// Summarize metrics over seeds into tables and plots.
    Report {
        /// Run directories to collect; defaults to the configured one.
        dirs: Vec<PathBuf>,
        /// Where to write the report; defaults to `<run dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        select: Select,
        /// Continue a run directory that already holds outputs.
        #[arg(long)]
        resume: bool,
    },
}

fn experiment(config: &Option<PathBuf>) -> Result<Experiment> {
    let path = config.as_ref().context("--config is required")?;
    let cfg = ExperimentConfig::load(path)?;
    Ok(Experiment::new(cfg)?)
}

fn announce(stage: &str, scope: &str, status: StageStatus) {
    log::info!("{stage} {scope}: {status:?}");
    println!("{stage:<15} {scope:<30} {status:?}");
}

/// Calls `f` for each selected (seed, target, condition).
fn each_condition(
    exp: &Experiment,
    select: &Select,
    stage: &str,
    mut f: impl FnMut(u64, &str, Condition) -> aud_core::Result<StageStatus>,
) -> Result<()> {
    let sel = select.selection();
    exp.prepare()?;
    for seed in exp.seeds(&sel)? {
        for target in exp.targets(&sel)? {
            for c in exp.conditions(&sel)? {
                let status = f(seed, &target, c)?;
                announce(stage, &format!("seed {seed} {target} {c}"), status);
            }
        }
    }
    Ok(())
}

/// Calls `f` for each selected (seed, target).
fn each_target(
    exp: &Experiment,
    select: &Select,
    stage: &str,
    mut f: impl FnMut(u64, &str) -> aud_core::Result<StageStatus>,
) -> Result<()> {
    let sel = select.selection();
    exp.prepare()?;
    for seed in exp.seeds(&sel)? {
        for target in exp.targets(&sel)? {
            let status = f(seed, &target)?;
            announce(stage, &format!("seed {seed} {target}"), status);
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest => {
            let exp = experiment(&cli.config)?;
            exp.prepare()?;
            announce("ingest", "", exp.ingest()?);
        }
        Command::TrainVc(select) => {
            let exp = experiment(&cli.config)?;
            exp.prepare()?;
            for seed in exp.seeds(&select.selection())? {
                announce("train-vc", &format!("seed {seed}"), exp.train_vc(seed)?);
            }
        }
        Command::ExtractStyles(select) => {
            let exp = experiment(&cli.config)?;
            each_target(&exp, &select, "extract-styles", |s, t| Ok(exp.extract_styles(s, t)?.0))?;
        }
        Command::Medoid(select) => {
            let exp = experiment(&cli.config)?;
            each_target(&exp, &select, "medoid", |s, t| {
                let (status, record) = exp.medoid(s, t)?;
                println!("seed {s} {t}: medoid {}", record.utterance_id);
                Ok(status)
            })?;
        }
        Command::Convert(select) => {
            let exp = experiment(&cli.config)?;
            each_condition(&exp, &select, "convert", |s, t, c| exp.convert(s, t, c))?;
        }
        Command::TrainAud(select) => {
            let exp = experiment(&cli.config)?;
            each_condition(&exp, &select, "train-aud", |s, t, c| exp.train_aud(s, t, c))?;
        }
        Command::Decode(select) => {
            let exp = experiment(&cli.config)?;
            each_condition(&exp, &select, "decode", |s, t, c| exp.decode(s, t, c))?;
        }
        Command::Evaluate(select) => {
            let exp = experiment(&cli.config)?;
            each_condition(&exp, &select, "evaluate", |s, t, c| Ok(exp.evaluate(s, t, c)?.0))?;
        }
        Command::Report { dirs, out } => {
            let (dirs, default_out) = if dirs.is_empty() {
                let exp = experiment(&cli.config)?;
                (vec![exp.layout.root.clone()], exp.layout.report_dir())
            } else {
                let out = dirs[0].join("report");
                (dirs, out)
            };
            let report = build_report(collect_metrics(&dirs)?)?;
            report.write(&out.unwrap_or(default_out))?;
            print!("{}", report.to_text());
        }
        Command::Run { select, resume } => {
            let exp = experiment(&cli.config)?;
            let summary = exp.run(&RunOptions {
                resume,
                selection: select.selection(),
            })?;
            for r in &summary.stages {
                let mut scope = String::new();
                if let Some(s) = r.seed {
                    scope.push_str(&format!("seed {s}"));
                }
                if let Some(t) = &r.target {
                    scope.push_str(&format!(" {t}"));
                }
                if let Some(c) = r.condition {
                    scope.push_str(&format!(" {c}"));
                }
                println!("{:<15} {:<30} {:?}", r.stage, scope.trim(), r.status);
            }
            print!("{}", summary.report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
