//! The `nef` command line: process control over the local control socket.
//!
//! Exit codes: 0 success, 1 remote or connection error, 2 usage error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use clap::{Parser, Subcommand};
use nefele_core::logbuf::LogRecord;
use nefele_core::{Npid, ProcessRecord, ResourceVector, SpawnKind, SpawnRequest, TaskSpec};
use nix::sys::signal::Signal;

use crate::client::{Client, ClientError};
use crate::proto::{CtlResponse, RequestState, Scope};

pub const EXIT_OK: u8 = 0;
pub const EXIT_REMOTE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "nef", version, about = "Control processes on a nefele cluster")]
pub struct Cli {
    /// Control socket of the local agent.
    #[arg(long, global = true, env = "NEFELE_SOCK", default_value = "nefele-data/nefele.sock")]
    pub agent: PathBuf,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Spawn a program; prints one NPID per line.
    Spawn {
        /// CPU per task in millicores.
        #[arg(long, default_value_t = 100)]
        cpu: u64,
        /// Memory per task in bytes.
        #[arg(long, default_value_t = 64 << 20)]
        mem: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Service name registered for each task once running.
        #[arg(long)]
        name: Option<String>,
        #[arg(long = "env", value_name = "K=V")]
        env: Vec<String>,
        #[arg(long)]
        tenant: Option<String>,
        /// Place the tasks on distinct nodes.
        #[arg(long)]
        spread: bool,
        /// Count tasks as running only after they complete the handshake.
        #[arg(long)]
        handshake: bool,
        #[arg(long)]
        json: bool,
        path: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// List processes.
    Ps {
        #[arg(long, value_enum, default_value = "cluster")]
        scope: ScopeArg,
        #[arg(long)]
        tenant: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Signal processes by NPID (`-9`, `-s KILL`; default TERM).
    Kill {
        #[arg(short = 's', long = "signal", default_value = "TERM")]
        signal: String,
        #[arg(required = true)]
        npids: Vec<String>,
    },
    /// Signal every process whose executable name starts with PATTERN.
    Killall {
        #[arg(short = 's', long = "signal", default_value = "TERM")]
        signal: String,
        pattern: String,
    },
    /// Block until the process ends, then print how it ended.
    Monitor { npid: String },
    /// Print a process's output as "ts npid stream line".
    Logs {
        npid: String,
        #[arg(short, long)]
        follow: bool,
        #[arg(long = "last")]
        last: Option<usize>,
    },
    /// Registered names.
    Names {
        #[arg(long)]
        tenant: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Cluster members.
    Nodes {
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ScopeArg {
    Local,
    Cluster,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::Local => Scope::Local,
            ScopeArg::Cluster => Scope::Cluster,
        }
    }
}

/// Rewrites `kill -9 …` and `killall -KILL …` into `-s 9` form for the parser.
pub fn normalize_args(args: Vec<String>) -> Vec<String> {
    let Some(pos) = args.iter().position(|a| a == "kill" || a == "killall") else { return args };
    let mut out: Vec<String> = args[..=pos].to_vec();
    for a in &args[pos + 1..] {
        let short_sig = a.len() > 1
            && a.starts_with('-')
            && !a.starts_with("--")
            && a != "-s"
            && (a[1..].chars().all(|c| c.is_ascii_digit()) || a[1..].chars().all(|c| c.is_ascii_uppercase()));
        if short_sig {
            out.push("-s".into());
            out.push(a[1..].to_string());
        } else {
            out.push(a.clone());
        }
    }
    out
}

/// Signal number from "9", "KILL", or "SIGKILL".
pub fn parse_signal(s: &str) -> Option<i32> {
    if let Ok(n) = s.parse::<i32>() {
        return Signal::try_from(n).ok().map(|sig| sig as i32);
    }
    let name = if s.starts_with("SIG") { s.to_string() } else { format!("SIG{s}") };
    Signal::from_str(&name.to_ascii_uppercase()).ok().map(|sig| sig as i32)
}

/// killall semantics: the executable's basename starts with `pattern`.
pub fn basename_matches(executable: &str, pattern: &str) -> bool {
    let base = executable.rsplit('/').next().unwrap_or(executable);
    base.starts_with(pattern)
}

pub fn format_log(r: &LogRecord) -> String {
    format!("{} {} {} {}", r.ts, r.npid, r.stream, r.line)
}

pub fn render_ps(procs: &[ProcessRecord]) -> String {
    let rows: Vec<[String; 7]> = procs
        .iter()
        .map(|p| {
            let cmd = std::iter::once(p.spec.executable.as_str())
                .chain(p.spec.args.iter().map(String::as_str))
                .collect::<Vec<_>>()
                .join(" ");
            [
                p.npid.to_string(),
                p.node.id.to_string(),
                p.state.to_string(),
                p.spec.resources.cpu.to_string(),
                p.spec.resources.mem.to_string(),
                p.spec.name.clone().unwrap_or_else(|| "-".into()),
                cmd,
            ]
        })
        .collect();
    let header = ["NPID", "NODE", "STATE", "CPU", "MEM", "NAME", "CMD"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |r: &[String; 7]| {
        let mut s = String::new();
        for (i, c) in r.iter().enumerate() {
            if i == 6 {
                s.push_str(c);
            } else {
                s.push_str(&format!("{c:<w$}  ", w = widths[i]));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn parse_npid(s: &str) -> Result<Npid, u8> {
    s.parse().map_err(|e| {
        eprintln!("nef: {s}: {e}");
        EXIT_USAGE
    })
}

fn remote(e: ClientError) -> u8 {
    eprintln!("nef: {e}");
    EXIT_REMOTE
}

fn signal_arg(s: &str) -> Result<i32, u8> {
    parse_signal(s).ok_or_else(|| {
        eprintln!("nef: unknown signal {s}");
        EXIT_USAGE
    })
}

/// Runs one parsed invocation and returns the exit code.
pub async fn run(cli: Cli) -> u8 {
    match execute(cli).await {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

async fn execute(cli: Cli) -> Result<(), u8> {
    let client = Client::connect(&cli.agent).await.map_err(remote)?;
    match cli.cmd {
        Cmd::Spawn { cpu, mem, count, name, env, tenant, spread, handshake, json, path, args } => {
            let mut vars = BTreeMap::new();
            for kv in env {
                let Some((k, v)) = kv.split_once('=') else {
                    eprintln!("nef: --env expects K=V, got {kv}");
                    return Err(EXIT_USAGE);
                };
                vars.insert(k.to_string(), v.to_string());
            }
            let mut task = TaskSpec::new(path, ResourceVector::new(cpu, mem)).with_args(args);
            task.env = vars;
            task.name = name;
            task.await_handshake = handshake;
            if spread {
                task.anti_affinity_group = Some("nef-spread".into());
            }
            let tenant = tenant.unwrap_or_else(nefele_core::model::default_tenant);
            let req = if count > 1 {
                SpawnRequest::nspawn(tenant, task, count)
            } else {
                SpawnRequest::new(tenant, SpawnKind::Spawn, vec![task])
            };
            let st = client.submit(req).await.map_err(remote)?;
            if json {
                println!("{}", serde_json::to_string(&st).expect("serializable"));
            }
            if st.state != RequestState::Placed {
                eprintln!("nef: rejected: {}", st.reason.unwrap_or_else(|| "unknown reason".into()));
                return Err(EXIT_REMOTE);
            }
            if !json {
                for n in st.npids {
                    println!("{n}");
                }
            }
        }
        Cmd::Ps { scope, tenant, json } => {
            let l = client.ps(scope.into(), tenant.as_deref()).await.map_err(remote)?;
            if l.partial {
                eprintln!("nef: warning: partial results; no answer from nodes {:?}", l.unreachable);
            }
            if json {
                println!("{}", serde_json::to_string(&l.processes).expect("serializable"));
            } else {
                print!("{}", render_ps(&l.processes));
            }
        }
        Cmd::Kill { signal, npids } => {
            let sig = signal_arg(&signal)?;
            let mut failed = false;
            for s in npids {
                let npid = parse_npid(&s)?;
                if let Err(e) = client.kill(npid, sig).await {
                    eprintln!("nef: {npid}: {e}");
                    failed = true;
                }
            }
            if failed {
                return Err(EXIT_REMOTE);
            }
        }
        Cmd::Killall { signal, pattern } => {
            let sig = signal_arg(&signal)?;
            let l = client.ps(Scope::Cluster, None).await.map_err(remote)?;
            let mut signaled = 0;
            for p in l.processes.iter().filter(|p| basename_matches(&p.spec.executable, &pattern)) {
                match client.kill(p.npid, sig).await {
                    Ok(()) => signaled += 1,
                    Err(e) => eprintln!("nef: {}: {e}", p.npid),
                }
            }
            if signaled == 0 {
                println!("0 matched");
                return Err(EXIT_REMOTE);
            }
            println!("{signaled} signaled");
        }
        Cmd::Monitor { npid } => {
            let target = parse_npid(&npid)?;
            client.attach(None).await.map_err(remote)?;
            client.monitor(target).await.map_err(remote)?;
            loop {
                match client.recv(Duration::from_secs(3600)).await.map_err(remote)? {
                    CtlResponse::Down(d) if d.npid == target => {
                        println!("{d}");
                        break;
                    }
                    _ => continue,
                }
            }
        }
        Cmd::Logs { npid, follow, last } => {
            let npid = parse_npid(&npid)?;
            let mut rx = client.logs(npid, follow, last).map_err(remote)?;
            while let Some(r) = rx.recv().await {
                println!("{}", format_log(&r));
            }
        }
        Cmd::Names { tenant, json } => {
            let entries = client.names(tenant.as_deref()).await.map_err(remote)?;
            if json {
                println!("{}", serde_json::to_string(&entries).expect("serializable"));
            } else {
                for e in entries {
                    let regs: Vec<String> = e.registrants.iter().map(|(n, _)| n.to_string()).collect();
                    println!("{} {} {}", e.tenant, e.key, regs.join(","));
                }
            }
        }
        Cmd::Nodes { json } => {
            let nodes = client.nodes().await.map_err(remote)?;
            if json {
                println!("{}", serde_json::to_string(&nodes).expect("serializable"));
            } else {
                println!("NODE  STATUS  GOSSIP  PEER  HTTP");
                for n in nodes {
                    println!(
                        "{}  {:?}  {}  {}  {}",
                        n.node,
                        n.status,
                        n.gossip_addr,
                        n.peer_addr.unwrap_or_else(|| "-".into()),
                        n.http_addr.unwrap_or_else(|| "-".into())
                    );
                }
            }
        }
    }
    Ok(())
}
