use std::path::PathBuf;

use arl2::commands::{execute, Command, Invocation};
use arl2::config::PrecisionName;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "arl2",
    version,
    about = "Hybrid attention benchmarks, generation, distillation and layer selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON config; defaults are used for fields it omits
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed, overriding the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Storage precision, overriding the config
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Double,
    Single,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep frame counts per backend; write metrics and fitted cost curves
    Bench,
    /// Stream frames through the toy model; dump frames and metrics
    Generate,
    /// Distill hybrid layers (stage 1 alignment or stage 2 joint)
    Distill,
    /// Rank layers from a score table and pick the replacement set
    SelectLayers {
        /// Score file (CSV or JSON), overriding the config
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Per-layer MACs and bytes against history length
    Cost,
}

fn main() {
    let cli = Cli::parse();
    let mut inv = Invocation {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        precision: cli.precision.map(|p| match p {
            PrecisionArg::Double => PrecisionName::Double,
            PrecisionArg::Single => PrecisionName::Single,
        }),
        scores: None,
    };
    let cmd = match cli.command {
        Cmd::Bench => Command::Bench,
        Cmd::Generate => Command::Generate,
        Cmd::Distill => Command::Distill,
        Cmd::SelectLayers { scores } => {
            inv.scores = scores;
            Command::SelectLayers
        }
        Cmd::Cost => Command::Cost,
    };
    std::process::exit(execute(cmd, &inv));
}
