//! Benchmark driver. Without `--agents` each subcommand launches its own desk
//! cluster of `nefele-agent` processes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nefele_agent::bench::{self, BenchError, BenchSpec, Endpoint};
use nefele_agent::cluster::{sibling_agent_bin, ClusterOptions, DeskCluster};

#[derive(Parser)]
#[command(name = "nefele-bench", version, about = "Workload benchmarks for nefele")]
struct Args {
    /// Path to nefele-agent; defaults to the one next to this binary.
    #[arg(long, global = true)]
    agent_bin: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a workload spec and write per-request records as CSV.
    Run {
        spec: PathBuf,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Existing agents as NODE=SOCKET, instead of launching a cluster.
        #[arg(long = "agents", value_delimiter = ',')]
        agents: Vec<String>,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Death-to-DOWN latency of a co-located victim on a one-node cluster.
    Crash {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Process start time: direct, local placement, remote placement.
    SpawnBaselines {
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

fn parse_endpoint(s: &str) -> Result<Endpoint, BenchError> {
    let (node, socket) = s.split_once('=').ok_or_else(|| BenchError::Other(format!("expected NODE=SOCKET, got {s}")))?;
    let node = node.parse().map_err(|_| BenchError::Other(format!("bad node id in {s}")))?;
    Ok(Endpoint { node, socket: PathBuf::from(socket) })
}

fn agent_bin(a: Option<PathBuf>) -> Result<PathBuf, BenchError> {
    a.or_else(sibling_agent_bin).ok_or_else(|| BenchError::Other("nefele-agent not found; pass --agent-bin".into()))
}

fn launch(opts: ClusterOptions) -> Result<DeskCluster, BenchError> {
    DeskCluster::launch(opts).map_err(|e| BenchError::Other(e.to_string()))
}

fn endpoints(c: &DeskCluster) -> Vec<Endpoint> {
    c.members().iter().map(|m| Endpoint { node: m.id, socket: m.socket() }).collect()
}

async fn main_async(args: Args) -> Result<(), BenchError> {
    match args.cmd {
        Cmd::Run { spec, out, agents, json } => {
            let spec = BenchSpec::load(&spec)?;
            let mut _cluster = None;
            let eps = if agents.is_empty() {
                let c = launch(spec.cluster.options(agent_bin(args.agent_bin)?))?;
                let eps = endpoints(&c);
                _cluster = Some(c);
                eps
            } else {
                agents.iter().map(|s| parse_endpoint(s)).collect::<Result<_, _>>()?
            };
            let report = bench::run(&spec.workload, &eps).await?;
            let file = std::fs::File::create(&out).map_err(|e| BenchError::Other(format!("{}: {e}", out.display())))?;
            bench::write_csv(&report.records, file)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report.summary).expect("serializable"));
            } else {
                println!("{}", report.summary);
            }
            if report.summary.partial {
                return Err(BenchError::Other(format!("run incomplete; partial results in {}", out.display())));
            }
        }
        Cmd::Crash { trials } => {
            let c = launch(ClusterOptions::new(agent_bin(args.agent_bin)?, 1))?;
            let client = c.client(1).await.map_err(|e| BenchError::Other(e.to_string()))?;
            let report = bench::measure_crash_latency(&client, trials).await?;
            println!("{report}");
        }
        Cmd::SpawnBaselines { trials } => {
            let opts = ClusterOptions::new(agent_bin(args.agent_bin)?, 2).node_capacity(1, 1, 1 << 30);
            let c = launch(opts)?;
            let local = c.client(2).await.map_err(|e| BenchError::Other(e.to_string()))?;
            let remote = c.client(1).await.map_err(|e| BenchError::Other(e.to_string()))?;
            let report = bench::measure_spawn_baselines(&local, &remote, 1, trials).await?;
            print!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_env("NEFELE_LOG")).with_writer(std::io::stderr).init();
    let args = Args::parse();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    match rt.block_on(main_async(args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nefele-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
