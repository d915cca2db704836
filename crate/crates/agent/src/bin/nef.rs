use std::process::ExitCode;

use clap::Parser;
use nefele_agent::cli::{normalize_args, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse_from(normalize_args(std::env::args().collect()));
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
    ExitCode::from(rt.block_on(run(cli)))
}
