mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}\nhint: {hint}")]
    Usage { message: String, hint: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(message: impl Into<String>, hint: impl Into<String>) -> Self {
        CliError::Usage {
            message: message.into(),
            hint: hint.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage { .. } => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    neurocam::augment::AugmentError,
    neurocam::explain::ExplainError,
    neurocam::ggp::GgpError,
    neurocam::nn::NnError,
    neurocam::optim::OptimError,
    neurocam::phantom::PhantomError,
    neurocam::report::ReportError,
    neurocam::volio::VolumeError,
    serde_json::Error
);

/// Dyslexia-style two-class volume classification with Grad-CAM explanations.
#[derive(Debug, Parser)]
#[command(name = "neurocam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-class dataset with known discriminative blobs.
    Phantom(PhantomArgs),
    /// Split a dataset and train a CNN.
    Train(DataArgs),
    /// Evolve CNN architectures with grammar-guided genetic programming.
    Search(SearchArgs),
    /// Fit the linear SVM baseline.
    Svm(DataArgs),
    /// Report a trained model's accuracy on one split.
    Eval(EvalArgs),
    /// Grad-CAM relevance for one subject.
    Explain(ExplainArgs),
    /// Class-average relevance with region and peak tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for every random stream (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory with manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Brain mask NIfTI (default: mask.nii in the dataset).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// BNF grammar (default: the built-in one).
    #[arg(long)]
    grammar: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassArg {
    Typical,
    Dyslexic,
}

impl ClassArg {
    fn index(self) -> usize {
        match self {
            ClassArg::Typical => 0,
            ClassArg::Dyslexic => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Replicate,
    Slicegrad,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory (default: the one the model was trained on).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Brain mask NIfTI (default: mask.nii in the dataset).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write eval.csv and run.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MapArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Atlas NIfTI; labels are read from atlas_labels.csv beside it
    /// (default: atlas.nii in the dataset).
    #[arg(long)]
    atlas: Option<PathBuf>,
    /// Grad-CAM spreading (default: slicegrad for 2D models, 3d for 3D).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Multiply by guided backpropagation.
    #[arg(long)]
    guided: bool,
    /// Fraction of in-mask voxels kept by the threshold.
    #[arg(long, default_value_t = neurocam::report::DEFAULT_TOPQ)]
    topq: f64,
    /// Number of peaks listed.
    #[arg(long, default_value_t = 10)]
    peaks: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    map: MapArgs,
    /// Subject id from the manifest.
    #[arg(long)]
    subject: String,
    /// Target class (default: the subject's label).
    #[arg(long, value_enum)]
    class: Option<ClassArg>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    map: MapArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

fn main() -> ExitCode {
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
            ExitCode::from(e.exit_code())
        }
    }
}
