use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nefele_agent::AgentConfig;
use tracing_subscriber::EnvFilter;

/// Runs one nefele node agent until SIGTERM or SIGINT.
#[derive(Parser)]
#[command(name = "nefele-agent", version)]
struct Args {
    /// TOML configuration file; every key is optional.
    #[arg(short, long, env = "NEFELE_CONFIG")]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("NEFELE_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let cfg = match &args.config {
        Some(p) => match AgentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("nefele-agent: {e}");
                return ExitCode::from(2);
            }
        },
        None => AgentConfig::default(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    match rt.block_on(nefele_agent::agent::run(cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nefele-agent: {e}");
            ExitCode::FAILURE
        }
    }
}
