use std::process::ExitCode;

use clap::Parser;
use fedseg_cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    fedseg_cli::run(Cli::parse())
}
