//! Minimal frame-speaking process for tests: completes the handshake, then
//! prints every mailbox item it receives, one per line.

use std::io::Write;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use nefele_agent::proto::CtlResponse;
use nefele_agent::Client;
use nefele_core::messaging::NameKey;

#[derive(Parser)]
#[command(name = "nefele-stub")]
struct Args {
    /// Register this name after the handshake.
    #[arg(long)]
    register: Option<String>,
    /// Subscribe to this topic after the handshake.
    #[arg(long)]
    subscribe: Option<String>,
    /// Exit with this status after this many received messages.
    #[arg(long)]
    exit_after: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
    rt.block_on(async move {
        let token = std::env::var("NEFELE_TOKEN").unwrap_or_default();
        let client = match Client::from_env().await {
            Ok(c) => c,
            Err(e) => {
                eprintln!("stub: {e}");
                return ExitCode::from(3);
            }
        };
        let npid = match client.hello(&token, Some(std::process::id())).await {
            Ok((npid, _)) => npid,
            Err(e) => {
                eprintln!("stub: handshake: {e}");
                return ExitCode::from(4);
            }
        };
        let mut out = std::io::stdout();
        let _ = writeln!(out, "ready {npid}");
        if let Some(name) = args.register {
            if let Err(e) = client.register(NameKey::Name(name)).await {
                eprintln!("stub: register: {e}");
                return ExitCode::from(5);
            }
        }
        if let Some(topic) = args.subscribe {
            if let Err(e) = client.subscribe(&topic).await {
                eprintln!("stub: subscribe: {e}");
                return ExitCode::from(5);
            }
        }
        let mut seen = 0;
        loop {
            match client.recv(Duration::from_secs(3600)).await {
                Ok(CtlResponse::Msg(env)) => {
                    let _ = writeln!(out, "msg {} {} {}", env.src, env.msg_seq, String::from_utf8_lossy(&env.payload));
                    seen += 1;
                }
                Ok(CtlResponse::Down(d)) => {
                    let _ = writeln!(out, "{d}");
                    seen += 1;
                }
                Ok(_) => continue,
                Err(e) => {
                    eprintln!("stub: {e}");
                    return ExitCode::from(6);
                }
            }
            let _ = out.flush();
            if args.exit_after.is_some_and(|n| seen >= n) {
                return ExitCode::SUCCESS;
            }
        }
    })
}
