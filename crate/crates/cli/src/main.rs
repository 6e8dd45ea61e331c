use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod dataset;
mod palette;

#[derive(Parser)]
#[command(name = "csi", version, about = "Zero-shot pseudo-label relabeling under mismatched taxonomies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum)]
    pub csi: Option<Switch>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
pub enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with oracle detections and classifications.
    Gen(Common),
    /// Run the self-training simulation and write its report.
    Train(Common),
    /// Relabel a directory of pseudo-labels offline.
    Relabel {
        #[command(flatten)]
        common: Common,
        /// Training step the pseudo-labels belong to.
        #[arg(long)]
        step: u64,
        /// Pseudo-label directory; overrides `data.pseudo`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also write the patch manifest for an external classifier.
        #[arg(long)]
        manifest: bool,
    },
    /// Collect open-class votes and finalize the relabeling map.
    Automap(Common),
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Render label rasters as palette PPM images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(c) => commands::gen(&c),
        Command::Train(c) => commands::train(&c),
        Command::Relabel { common, step, input, manifest } => commands::relabel(&common, step, input, manifest),
        Command::Automap(c) => commands::automap(&c),
        Command::Eval { common, pred, gt } => commands::eval(&common, pred, gt),
        Command::Render { common, input } => commands::render(&common, &input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
