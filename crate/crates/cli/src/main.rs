use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ovcal::config::ExperimentConfig;
use ovcal::experiment::{self, CONFIG_FILE};
use ovcal::gradcheck;

#[derive(Parser)]
#[command(
    name = "ovcal",
    version,
    about = "Synthetic open-vocabulary calibration experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; defaults to the dataset's own config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the diversification/distillation ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic gradient against finite differences.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

fn resolve(common: &Common, dataset: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, dataset) {
        (Some(path), _) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        (None, Some(dir)) => {
            let path = dir.join(CONFIG_FILE);
            ExperimentConfig::load(&path)
                .with_context(|| format!("reading config {}", path.display()))?
        }
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = resolve(&common, None)?;
            let ds = experiment::cmd_gen(&cfg, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} train and {} val images to {}",
                ds.train.len(),
                ds.val.len(),
                out.display()
            );
        }
        Command::Train {
            common,
            dataset,
            out,
        } => {
            let cfg = resolve(&common, Some(&dataset))?;
            let (_, log) = experiment::cmd_train(&cfg, &dataset, &out)?;
            match (log.first(), log.last()) {
                (Some(a), Some(b)) => {
                    println!("{} steps, loss {:.6} -> {:.6}", log.len(), a.total, b.total)
                }
                _ => println!("0 steps, wrote the initialization"),
            }
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            out,
        } => {
            let cfg = common
                .config
                .is_some()
                .then(|| resolve(&common, None))
                .transpose()?;
            experiment::cmd_eval(&checkpoint, &dataset, &out, cfg.as_ref())?;
            print!("{}", std::fs::read_to_string(&out)?);
        }
        Command::Ablate {
            common,
            dataset,
            out,
        } => {
            let cfg = resolve(&common, Some(&dataset))?;
            let rows = experiment::cmd_ablate(&cfg, &dataset, &out)?;
            print!("{}", experiment::ablation_text(&rows));
        }
        Command::CheckGrads { seed, points } => {
            if points == 0 {
                bail!("--points must be positive");
            }
            let mut ok = true;
            for r in gradcheck::gradient_suite(points, seed)? {
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {:<16} points={} max_rel_error={:.3e} tolerance={:.0e}",
                    r.name, r.points, r.max_rel_error, r.tolerance
                );
                ok &= r.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
