//! `nlcen` — train, evaluate and attack NLCEN segmentation models.
//!
//! ```text
//! nlcen synth  --out data/lung
//! nlcen train  --config run.ini --variant no-nlce --out runs/base
//! nlcen eval   --config run.ini --checkpoint runs/base/checkpoint.nlck
//! nlcen sweep  --config run.ini --checkpoint runs/base/checkpoint.nlck --intensities 0.5,16,32
//! nlcen ablate --config run.ini --seed 1 --out runs/ablate-1
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlcen::config::{parse_intensities, DataSource, ExperimentConfig};
use nlcen::harness::{cmd_ablate, cmd_eval, cmd_sweep, cmd_synth, cmd_train, RunArtifacts};
use nlcen::{Result, Variant};

#[derive(Parser)]
#[command(name = "nlcen", version, about = "NLCEN segmentation under targeted iterative FGSM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Train one model variant.
    Train(Common),
    /// Clean DIC/JSC of a checkpoint on the test split.
    Eval(WithCheckpoint),
    /// DIC/JSC of a checkpoint under attacks of increasing intensity.
    Sweep(WithCheckpoint),
    /// Train and sweep the five ablation models.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// INI experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; also seeds synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated attack intensities, or `paper`.
    #[arg(long)]
    intensities: Option<String>,
    /// full, no-nlce, no-nl or no-ce.
    #[arg(long)]
    variant: Option<Variant>,
    /// Dataset directory instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train` or `ablate`.
    #[arg(long)]
    checkpoint: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(list) = &self.intensities {
            cfg.intensities = parse_intensities(list)?;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(dir) = &self.data {
            cfg.data = DataSource::Directory(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(artifacts: &RunArtifacts) {
    let files = [
        &artifacts.checkpoint,
        &artifacts.train_log,
        &artifacts.metrics,
        &artifacts.sweep,
        &artifacts.plot,
    ];
    for path in files.into_iter().flatten() {
        println!("{}", path.display());
    }
    println!("{}", artifacts.manifest.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.config()?;
            report(&cmd_synth(&cfg, &cfg.out)?);
        }
        Command::Train(c) => report(&cmd_train(&c.config()?)?),
        Command::Eval(c) => report(&cmd_eval(&c.common.config()?, &c.checkpoint)?),
        Command::Sweep(c) => report(&cmd_sweep(&c.common.config()?, &c.checkpoint)?),
        Command::Ablate(c) => {
            let (r, artifacts) = cmd_ablate(&c.config()?)?;
            if !r.frozen_base_intact() {
                log::warn!("a frozen fine-tune changed the base network");
            }
            report(&artifacts);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
