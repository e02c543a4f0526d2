use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radiopipe::experiments::{
    run_experiment, run_ingest, run_probe, run_ranking, run_report, ExperimentConfig,
    ExperimentError, IngestConfig, ProbeConfig, ReportConfig,
};
use radiopipe::phantom::{generate_phantom, PhantomConfig};

/// Breast DCE-MRI subtype classification pipeline: phantom generation,
/// ingest, the three learning regimes and figure reports.
#[derive(Debug, Parser)]
#[command(name = "radiopipe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file (see docs/config.md).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed(s) in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset in the on-disk dataset layout.
    Phantom(Common),
    /// Load, harmonize and write the patch cache of a dataset.
    Ingest(Common),
    /// Run one regime (scratch, transfer or features) under cross-validation.
    Run(Common),
    /// Cross-validate an SVM on every layer tap of an extractor.
    ProbeLayers(Common),
    /// Rank single features of one tap by patient-level AUC.
    RankFeatures(Common),
    /// Regenerate figures from training logs, probe tables and rankings.
    Report(Common),
}

fn read_json<T: serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T, ExperimentError> {
    let path = path.ok_or_else(|| ExperimentError::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Phantom(c) => {
            let mut cfg: PhantomConfig = match &c.config {
                Some(p) => read_json(Some(p))?,
                None => PhantomConfig::default(),
            };
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let out = c
                .out
                .ok_or_else(|| ExperimentError::Config("phantom needs --out".into()))?;
            let summary = generate_phantom(&cfg, &out)?;
            println!(
                "wrote {} cases ({} positive) to {}",
                summary.n_cases,
                summary.n_positive,
                out.display()
            );
        }
        Command::Ingest(c) => {
            let mut cfg: IngestConfig = read_json(c.config.as_deref())?;
            if let Some(o) = c.out {
                cfg.output_dir = o;
            }
            if let Some(s) = c.seed {
                cfg.augmentation.seed = s;
            }
            let s = run_ingest(&cfg)?;
            println!(
                "ingested {} cases ({} skipped); patches per size: {:?}",
                s.n_cases,
                s.skipped.len(),
                s.patches
            );
        }
        Command::Run(c) => {
            let mut cfg: ExperimentConfig = read_json(c.config.as_deref())?;
            if let Some(o) = c.out {
                cfg.output_dir = o;
            }
            if let Some(s) = c.seed {
                cfg.seeds = vec![s];
            }
            let out = run_experiment(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(&out.results_path).map_err(|source| {
                    ExperimentError::Io {
                        path: out.results_path.clone(),
                        source,
                    }
                })?
            );
        }
        Command::ProbeLayers(c) => {
            let mut cfg: ProbeConfig = read_json(c.config.as_deref())?;
            if let Some(o) = c.out {
                cfg.output_dir = o;
            }
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            for r in run_probe(&cfg)? {
                println!(
                    "{:<10} {:>5}  train {:.3}  test {:.3}",
                    r.tap, r.feature_length, r.training_auc, r.test_auc
                );
            }
        }
        Command::RankFeatures(c) => {
            let mut cfg: ProbeConfig = read_json(c.config.as_deref())?;
            if let Some(o) = c.out {
                cfg.output_dir = o;
            }
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let ranking = run_ranking(&cfg)?;
            if let Some(top) = ranking.first() {
                println!(
                    "{} features ranked; best is #{} with AUC {:.3}",
                    ranking.len(),
                    top.feature_index,
                    top.auc
                );
            }
        }
        Command::Report(c) => {
            let mut cfg: ReportConfig = read_json(c.config.as_deref())?;
            if let Some(o) = c.out {
                cfg.output_dir = o;
            }
            for p in run_report(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
