mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rep_core::rep::NoiseType;
use rep_core::Error;

#[derive(Debug, Parser)]
#[command(name = "rep", version, about = "Replay prompting on a frozen multimodal backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the backbone on complete synthetic data and freeze it.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Tune replay buffers on a frozen backbone and evaluate them.
    Tune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        rep: RepFlags,
        /// Backbone checkpoint from `rep pretrain`. Without it the backbone
        /// is pretrained from the config first.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Evaluate a tuned checkpoint under missing scenarios.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `rep tune`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "missing-scenario", value_name = "SCENARIO")]
        scenarios: Vec<String>,
    },
    /// Run an ablation grid, resuming any finished cells.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate a results table into summary and plot-data files.
    Report {
        /// Results CSV written by `rep ablate`.
        results: PathBuf,
        /// Directory for the report files (default: next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Omitted fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set rep.buffer_width=8`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Run with this single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RepFlags {
    /// `complete`, `single:<m>:<rate>` or `multi:<m>,<m>:<rate>`. Repeatable;
    /// the first one is the training scenario.
    #[arg(long = "missing-scenario", value_name = "SCENARIO")]
    scenarios: Vec<String>,
    #[arg(long)]
    buffer_width: Option<usize>,
    /// Deepest layer that receives replay.
    #[arg(long)]
    buffer_depth: Option<usize>,
    #[arg(long)]
    noise_eps: Option<f64>,
    #[arg(long)]
    noise_type: Option<NoiseType>,
    #[arg(long)]
    ortho_weight: Option<f64>,
}

/// Exit code for a failure: 2 for bad input, 3 for incompatible inputs,
/// 4 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Compatibility(_) | Error::LayerOutOfRange { .. } => 3,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::NonConvergence { .. } => 4,
        Error::Config { .. }
        | Error::Schema(_)
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Io(_)
        | Error::InvalidRate(_)
        | Error::EmptyMissingSet
        | Error::EmptyScenarios
        | Error::UnknownModality { .. }
        | Error::NegativeNoise(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::Tune { common, rep, backbone } => commands::tune(&common, &rep, backbone.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            scenarios,
        } => commands::evaluate(&common, &checkpoint, &scenarios),
        Command::Ablate { common } => commands::ablate(&common),
        Command::Report { results, out } => commands::report(&results, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
