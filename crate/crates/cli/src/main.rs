use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod runfile;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn context(self, what: &str) -> Self {
        CliError {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<simam_core::Error> for CliError {
    fn from(e: simam_core::Error) -> Self {
        use simam_core::Error as E;
        let code = match &e {
            E::Config(_) | E::InvalidArgument(_) | E::ShapeMismatch { .. } => EXIT_USAGE,
            E::NonFinite(_) | E::Data(_) | E::DataRow { .. } | E::Image(_) | E::Format(_) | E::Io { .. } => EXIT_DATA,
            E::Divergence { .. } => EXIT_DIVERGED,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "simam", version, about = "Parameter-free attention networks: train, evaluate, ablate, cost, verify")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random stream (initialisation, shuffling, augmentation, synthetic data, oracles).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run file: an architecture TOML, or a TOML with `preset`/`[architecture]` and `[train]`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `manifest.csv`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Energy regulariser applied at every attention insertion.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Replace this command's artifacts in a non-empty output directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write metrics, checkpoints and the resolved run file.
    Train,
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Train once per λ value with everything else held fixed.
    Ablate(AblateArgs),
    /// Attention-module parameter formulas and whole-model cost.
    Cost(CostArgs),
    /// Run the numerical oracle suite.
    Verify,
    /// Write the seeded synthetic shape dataset.
    GenSynth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory (e.g. `<out>/best`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Defaults to the training run's image size when the checkpoint sits in a run directory.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', default_values_t = commands::DEFAULT_LAMBDAS)]
    pub lambdas: Vec<f64>,
    /// Run the trainings on separate threads.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Built-in architecture used when `--config` is absent.
    #[arg(long, default_value = "b4")]
    pub preset: String,
    /// Square input side; defaults to the architecture's input size.
    #[arg(long)]
    pub input: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub channels: u64,
    #[arg(long, default_value_t = 16)]
    pub reduction: u64,
    #[arg(long, default_value_t = 7)]
    pub kernel: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 60)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::Train => commands::train(g),
        Command::Eval(a) => commands::eval(g, a),
        Command::Ablate(a) => commands::ablate(g, a),
        Command::Cost(a) => commands::cost(g, a),
        Command::Verify => commands::verify(g),
        Command::GenSynth(a) => commands::gen_synth(g, a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
