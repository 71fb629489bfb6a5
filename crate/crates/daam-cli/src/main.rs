//! `daam`: data generation, training, evaluation and sweeps for the
//! domain adaptive attention model.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data, format
//! or I/O error, 3 numeric failure.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daam::trainer::Ablation;

#[derive(Parser, Debug)]
#[command(name = "daam", version, about = "Domain adaptive attention experiments on synthetic re-identification data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the four dataset splits and a manifest.
    Gen(Common),
    /// Pretrain on the source domain, then adapt to the target domain.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen`; regenerated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the parameters stored in a checkpoint.
    Eval {
        #[command(flatten)]
        from: FromCheckpoint,
    },
    /// Finite-difference audit of the full network and loss at a fresh init.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Images per domain in the audited batch.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Entries probed per parameter tensor; 0 probes all of them.
        #[arg(long, default_value_t = 0)]
        max_entries: usize,
    },
    /// Write shared/specific attention heatmaps for selected images.
    ExportAttn {
        #[command(flatten)]
        from: FromCheckpoint,
        /// Comma-separated sample indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
        /// Split the indices refer to.
        #[arg(long, default_value = "target_query")]
        split: String,
    },
    /// Adapt from a pretrained checkpoint once per cluster count.
    SweepK {
        #[command(flatten)]
        from: FromCheckpoint,
        /// Comma-separated cluster counts.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        ks: Vec<usize>,
    },
    /// Adapt from a pretrained checkpoint, reporting every iteration.
    SweepIters {
        #[command(flatten)]
        from: FromCheckpoint,
    },
}

/// Flags shared by every subcommand that builds an experiment config.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment config JSON; defaults are used for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Adaptation rounds; 0 gives the direct-transfer baseline.
    #[arg(long)]
    iterations: Option<usize>,
    /// Number of k-means clusters for the target weak labels.
    #[arg(long)]
    clusters: Option<usize>,
    /// Disable a loss term or module (repeatable).
    #[arg(long = "ablate", value_name = "NAME", value_parser = parse_ablation)]
    ablations: Vec<Ablation>,
    /// Overwrite an artifact directory that already holds results.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct FromCheckpoint {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by `gen`; regenerated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to the `config.json` of the run that wrote the checkpoint.
    #[command(flatten)]
    common: Common,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: daam::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAAM_LOG", "info")).format_timestamp_secs().init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
