use std::path::PathBuf;

use anyhow::Context;
use aunet::training::AblationGrid;
use aunet_cli::commands::{self, StatMetric};
use aunet_cli::config::RunConfig;
use aunet_cli::exit_code;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "aunet",
    version,
    about = "Mass segmentation with attention-guided dense upsampling"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for folds and ablation cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Backbone,
    Ratio,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the configured data.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, or a directory of predicted masks, against the data.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image; writes a mask and an overlay.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask for the overlay contour and DSC stamp.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate every cell of an ablation grid.
    Ablate {
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wilcoxon signed-rank test between two JSON reports.
    Stats {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value = "dsc")]
        metric: StatMetric,
    },
}

fn run(cli: Cli) -> anyhow::Result<String> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .finalize(cli.seed, cli.deterministic)?;
    match cli.command {
        Command::Synth { out } => commands::cmd_synth(&cfg, &out),
        Command::Train { out } => commands::cmd_train(&cfg, &out),
        Command::Eval {
            checkpoint,
            predictions,
            out,
        } => {
            let report = commands::cmd_eval(&cfg, checkpoint.as_deref(), predictions.as_deref(), &out)?;
            Ok(commands::describe(&report))
        }
        Command::Predict {
            checkpoint,
            image,
            mask,
            out,
        } => {
            let p = commands::cmd_predict(&cfg, &checkpoint, &image, mask.as_deref(), &out)?;
            let score = p.dsc.map(|d| format!("\nDSC {d:.4}")).unwrap_or_default();
            Ok(format!(
                "mask {}\noverlay {}{score}",
                p.mask.display(),
                p.overlay.display()
            ))
        }
        Command::Ablate { grid, out } => {
            let grid = match grid {
                Grid::Backbone => AblationGrid::Backbone,
                Grid::Ratio => AblationGrid::ReductionRatio,
            };
            commands::cmd_ablate(&cfg, grid, &out)
        }
        Command::Stats { a, b, metric } => commands::cmd_stats(&a, &b, metric),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(text) => println!("{}", text.trim_end()),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}
