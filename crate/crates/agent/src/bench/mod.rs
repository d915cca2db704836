//! Benchmark harness: replays a synthetic workload against running agents and
//! records per-request scheduling times.

mod baselines;
mod crash;

pub use baselines::{measure_spawn_baselines, BaselineReport, BaselineRow, LOCAL, REMOTE, SHELL};
pub use crash::{measure_crash_latency, CrashReport};

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nefele_core::membership::Status;
use nefele_core::stats::{summarize, Summary};
use nefele_core::workload::{generate, AdmissionMode, TraceEntry, WorkloadError, WorkloadSpec};
use nefele_core::{Npid, ResourceVector, SpawnKind, SpawnRequest, TaskSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinSet;
use uuid::Uuid;

use crate::client::{Client, ClientError};
use crate::cluster::ClusterOptions;
use crate::node::unix_us;
use crate::proto::RequestState;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("agent {node}: {source}")]
    Agent { node: u32, source: ClientError },
    #[error("no endpoint for admission node {0}")]
    NoEndpoint(u32),
    #[error("background load: {0}")]
    Background(String),
    #[error("writing results: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

/// Desk cluster shape used when the harness launches its own agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub nodes: u32,
    pub cpu_mc: u64,
    pub mem_bytes: u64,
    pub admission_workers: usize,
    pub emulated_link_delay_ms: u64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { nodes: 5, cpu_mc: 16_000, mem_bytes: 32 << 30, admission_workers: 8, emulated_link_delay_ms: 0 }
    }
}

impl ClusterSection {
    pub fn options(&self, agent_bin: impl Into<PathBuf>) -> ClusterOptions {
        ClusterOptions::new(agent_bin, self.nodes)
            .capacity(self.cpu_mc, self.mem_bytes)
            .admission_workers(self.admission_workers)
            .link_delay_ms(self.emulated_link_delay_ms)
    }
}

/// A benchmark spec file: `[workload]` plus an optional `[cluster]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub cluster: ClusterSection,
}

impl BenchSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self, BenchError> {
        let spec: BenchSpec = toml::from_str(text).map_err(|source| BenchError::Parse { path: path.into(), source })?;
        spec.workload.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Read { path: path.into(), source })?;
        Self::parse(&text, path)
    }
}

/// An agent the harness talks to.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub node: u32,
    pub socket: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Placed,
    Rejected,
    /// The admission agent went away before answering.
    Aborted,
}

/// One row of the results CSV. Timestamps are microseconds since the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub index: usize,
    pub request_id: Uuid,
    pub submit_ts: u64,
    pub decided_ts: Option<u64>,
    pub deployed_ts: Option<u64>,
    pub outcome: Outcome,
    pub tasks: u32,
    pub admission_node: u32,
    pub reason: Option<String>,
}

impl BenchRecord {
    /// Submission to every task running, in milliseconds.
    pub fn scheduling_ms(&self) -> Option<f64> {
        self.deployed_ts.map(|d| d.saturating_sub(self.submit_ts) as f64 / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub submitted: usize,
    pub placed: usize,
    pub rejected: usize,
    pub aborted: usize,
    /// rejected / (placed + rejected).
    pub rejection_rate: f64,
    /// Placed requests per second of wall time.
    pub throughput: f64,
    pub wall_s: f64,
    /// Scheduling time of placed requests, in milliseconds.
    pub scheduling_ms: Option<Summary>,
    /// Set when some agent became unreachable mid-run.
    pub partial: bool,
}

impl RunSummary {
    pub fn from_records(records: &[BenchRecord], wall_s: f64) -> Self {
        let count = |o| records.iter().filter(|r| r.outcome == o).count();
        let (placed, rejected, aborted) = (count(Outcome::Placed), count(Outcome::Rejected), count(Outcome::Aborted));
        let decided = placed + rejected;
        let times: Vec<f64> = records.iter().filter_map(BenchRecord::scheduling_ms).collect();
        RunSummary {
            submitted: records.len(),
            placed,
            rejected,
            aborted,
            rejection_rate: if decided == 0 { 0.0 } else { rejected as f64 / decided as f64 },
            throughput: if wall_s > 0.0 { placed as f64 / wall_s } else { 0.0 },
            wall_s,
            scheduling_ms: summarize(&times),
            partial: aborted > 0,
        }
    }
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "submitted {}  placed {}  rejected {}  aborted {}  rejection rate {:.3}",
            self.submitted, self.placed, self.rejected, self.aborted, self.rejection_rate
        )?;
        writeln!(f, "wall {:.2} s  throughput {:.2} placed/s", self.wall_s, self.throughput)?;
        match &self.scheduling_ms {
            Some(s) => write!(
                f,
                "scheduling time ms: p50 {:.2}  p95 {:.2}  p99 {:.2}  mean {:.2} ± {:.2}",
                s.p50, s.p95, s.p99, s.mean, s.std
            )?,
            None => write!(f, "scheduling time ms: no placed requests")?,
        }
        if self.partial {
            write!(f, "\nPARTIAL: an agent became unreachable during the run")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<BenchRecord>,
    pub summary: RunSummary,
}

/// Writes records with a header row.
pub fn write_csv<W: std::io::Write>(records: &[BenchRecord], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| BenchError::Csv(e.into()))?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<BenchRecord>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<BenchRecord>, _>>()?)
}

async fn connect_all(endpoints: &[Endpoint]) -> Result<Vec<(u32, Arc<Client>)>, BenchError> {
    let mut out = Vec::new();
    for e in endpoints {
        let c = Client::connect(&e.socket).await.map_err(|source| BenchError::Agent { node: e.node, source })?;
        out.push((e.node, Arc::new(c)));
    }
    Ok(out)
}

const BACKGROUND_GROUP: &str = "nefele-bench-background";

/// Pre-allocates `fraction` of every node's CPU with one long-lived sleeper
/// per node. Returns the sleepers so the caller can remove them.
pub async fn apply_background_load(client: &Client, fraction: f64) -> Result<Vec<Npid>, BenchError> {
    if fraction <= 0.0 {
        return Ok(Vec::new());
    }
    let agent = |source| BenchError::Agent { node: 0, source };
    let nodes = client.nodes().await.map_err(agent)?;
    let alive: Vec<_> = nodes.iter().filter(|n| n.status == Status::Alive).collect();
    let me = nodes.iter().find_map(|n| n.capacity).ok_or_else(|| BenchError::Background("no capacity reported".into()))?;
    let cpu = (me.cpu as f64 * fraction).round() as u64;
    if cpu == 0 {
        return Ok(Vec::new());
    }
    let mut task = TaskSpec::new("/bin/sleep", ResourceVector::new(cpu, 1 << 20)).with_args(["100000"]);
    task.anti_affinity_group = Some(BACKGROUND_GROUP.into());
    let req = SpawnRequest::nspawn(nefele_core::model::default_tenant(), task, alive.len());
    let st = client.submit(req).await.map_err(agent)?;
    if st.state != RequestState::Placed {
        return Err(BenchError::Background(format!(
            "could not place {} × {cpu} mc: {}",
            alive.len(),
            st.reason.unwrap_or_default()
        )));
    }
    Ok(st.npids)
}

pub async fn remove_background_load(client: &Client, npids: &[Npid]) {
    for n in npids {
        let _ = client.kill(*n, 9).await;
    }
}

fn request_for(spec: &WorkloadSpec, e: &TraceEntry) -> SpawnRequest {
    let task = TaskSpec::new(spec.executable.clone(), ResourceVector::new(e.cpu_mc, e.mem_bytes))
        .with_args([format!("{:.3}", e.duration_s)]);
    let tenant = nefele_core::model::default_tenant();
    if e.tasks == 1 {
        SpawnRequest::new(tenant, SpawnKind::Spawn, vec![task])
    } else {
        SpawnRequest::nspawn(tenant, task, e.tasks as usize)
    }
}

/// How long a single request may take before it is counted as aborted.
const REQUEST_DEADLINE: Duration = Duration::from_secs(120);

async fn submit_one(client: Arc<Client>, node: u32, req: SpawnRequest, index: usize, tasks: u32) -> BenchRecord {
    let request_id = req.request_id;
    let submit_ts = unix_us();
    let res = tokio::time::timeout(REQUEST_DEADLINE, client.submit(req)).await;
    let mut rec = BenchRecord {
        index,
        request_id,
        submit_ts,
        decided_ts: None,
        deployed_ts: None,
        outcome: Outcome::Aborted,
        tasks,
        admission_node: node,
        reason: None,
    };
    match res {
        Ok(Ok(st)) => {
            rec.decided_ts = st.decided_us.map(|d| d.max(submit_ts));
            match st.state {
                RequestState::Placed => {
                    rec.outcome = Outcome::Placed;
                    rec.deployed_ts = st.deployed_us.map(|d| d.max(rec.decided_ts.unwrap_or(submit_ts)));
                }
                RequestState::Rejected => {
                    rec.outcome = Outcome::Rejected;
                    rec.reason = st.reason;
                }
                other => rec.reason = Some(format!("request left in state {other:?}")),
            }
        }
        Ok(Err(e)) => rec.reason = Some(e.to_string()),
        Err(_) => rec.reason = Some("no decision before the deadline".into()),
    }
    rec
}

/// Replays the workload: applies background load, submits the trace at its
/// timestamps, and waits for every decision.
pub async fn run(spec: &WorkloadSpec, endpoints: &[Endpoint]) -> Result<RunReport, BenchError> {
    let trace = generate(spec)?;
    let clients = connect_all(endpoints).await?;
    let admission: Vec<(u32, Arc<Client>)> = match spec.admission {
        AdmissionMode::Single => {
            let c = clients
                .iter()
                .find(|(n, _)| *n == spec.admission_node)
                .cloned()
                .ok_or(BenchError::NoEndpoint(spec.admission_node))?;
            vec![c]
        }
        AdmissionMode::RoundRobin => clients.clone(),
    };
    let (_, first) = clients.first().cloned().ok_or(BenchError::NoEndpoint(spec.admission_node))?;
    let background = apply_background_load(&first, spec.background_load).await?;

    let start = Instant::now();
    let mut set = JoinSet::new();
    for e in &trace {
        tokio::time::sleep_until((start + Duration::from_secs_f64(e.at_s)).into()).await;
        let (node, client) = admission[e.index % admission.len()].clone();
        set.spawn(submit_one(client, node, request_for(spec, e), e.index, e.tasks));
    }
    let mut records = Vec::with_capacity(trace.len());
    while let Some(r) = set.join_next().await {
        records.push(r.map_err(|e| BenchError::Other(e.to_string()))?);
    }
    let wall_s = start.elapsed().as_secs_f64();
    records.sort_by_key(|r| r.index);
    remove_background_load(&first, &background).await;
    let summary = RunSummary::from_records(&records, wall_s);
    Ok(RunReport { records, summary })
}
