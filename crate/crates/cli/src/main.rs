use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod exit;
mod plot;

#[derive(Parser)]
#[command(name = "engine", version, about = "Build, train, search and evaluate bi-directional segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; execution is single-threaded, so only 1 is accepted.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Bionet,
    Bionetpp,
    Sub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    None,
    Random,
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Build a network graph and report its parameters and MACs.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        /// Topology file; required for `--arch sub`.
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Train a network and write a checkpoint, history and curve plot.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train this topology instead of the dense network of `[arch]`.
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Run the skip-connection search.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Phase-1 candidates for `--phase 2`; defaults to the output directory's phase1.json.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build { common, arch, topology } => commands::build(&common, arch, topology.as_deref()),
        Command::Train { common, topology } => commands::train(&common, topology.as_deref()),
        Command::Search {
            common,
            phase,
            baseline,
            candidates,
        } => commands::search(&common, phase, baseline, candidates.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => commands::eval(&common, &checkpoint, split),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::classify(&e))
        }
    }
}
