//! Command-line front end: `simulate`, `gen-data`, `eval` and `gradcheck`.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod overlay;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad config, arguments or input files. Exit code 2.
    Invalid(String),
    /// Failure while running. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fedseg::Error> for CliError {
    fn from(e: fedseg::Error) -> Self {
        use fedseg::Error as E;
        match e {
            E::Config { .. } | E::Format(_) | E::MissingMask { .. } | E::Usage(_) => CliError::Invalid(e.to_string()),
            E::Shape { .. } | E::Io { .. } | E::Image { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fedseg", version, about = "Federated attention U-Net segmentation simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config, or a manifest.json from an earlier run
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides run.out_dir)
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed (overrides run.seed)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Train clients in id order; `--sequential=false` trains them in parallel
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub sequential: Option<bool>,
    /// Write prediction overlays (eval)
    #[arg(long, global = true)]
    pub overlays: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federation and write CSVs, checkpoints and a manifest
    Simulate,
    /// Write synthetic phantoms in the BUS directory layout
    GenData(GenDataArgs),
    /// Evaluate a checkpoint on the configured server test set or a directory
    Eval(EvalArgs),
    /// Check every backward rule against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub normal: usize,
    #[arg(long, default_value_t = 0)]
    pub benign: usize,
    #[arg(long, default_value_t = 0)]
    pub malignant: usize,
    /// Edge length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// FPWT checkpoint
    pub checkpoint: PathBuf,
    /// BUS-style directory to evaluate on instead of the server test set
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&cli.global),
        Command::GenData(a) => commands::gen_data(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
