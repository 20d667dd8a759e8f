use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lethe_harness::runner::{run_pretrain, run_probe};
use lethe_harness::{emit_plot, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lethe", about = "Online test-time training poisoning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML), or a manifest from a previous run.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config value.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain both heads and write a checkpoint.
    Pretrain(Common),
    /// Run an attack stream against a pretrained model.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Attack name: lethean, random_pixel, corruption or fgsm.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Measure gradient correlations on a pretrained model.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Plot one or more forgetting-curve CSVs as SVG.
    Plot {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long, default_value = "curves.svg")]
        out: PathBuf,
    },
}

fn with_checkpoint(mut cfg: ExperimentConfig, checkpoint: Option<PathBuf>) -> ExperimentConfig {
    if let Some(c) = checkpoint {
        cfg.checkpoint = Some(c);
        cfg.pretrain = None;
    }
    cfg
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(common) => {
            let cfg = common.load()?;
            let (ck, hist) = run_pretrain(&cfg)?;
            println!("checkpoint {}", ck.display());
            println!("history {}", hist.display());
        }
        Command::Attack {
            common,
            checkpoint,
            attack,
        } => {
            let mut cfg = with_checkpoint(common.load()?, checkpoint);
            if let Some(a) = attack {
                cfg.attack.name = a;
            }
            let arts = run_experiment(&cfg)?;
            println!("curve {}", arts.curve_csv.display());
            println!("steps {}", arts.steps_csv.display());
            println!("probe {}", arts.probe_csv.display());
            println!("plot {}", arts.plot_svg.display());
            println!("manifest {}", arts.manifest.display());
        }
        Command::Probe { common, checkpoint } => {
            let cfg = with_checkpoint(common.load()?, checkpoint);
            let (path, reports) = run_probe(&cfg)?;
            for r in &reports {
                println!(
                    "{:<15} n={:<4} mean_inner={:+.6e} mean_cosine={:+.4} stderr={:.3e}",
                    r.mode.name(),
                    r.n,
                    r.mean_inner,
                    r.mean_cosine,
                    r.stderr
                );
            }
            println!("probe {}", path.display());
        }
        Command::Plot { csvs, out } => {
            let refs: Vec<&std::path::Path> = csvs.iter().map(PathBuf::as_path).collect();
            emit_plot(&refs, &out)?;
            println!("plot {}", out.display());
        }
    }
    Ok(())
}
