//! Desk clusters: several agents as separate OS processes on one host, for
//! tests and benchmarks.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use nefele_core::membership::Status;
use nix::sys::signal::{kill, Signal};
use nix::unistd::Pid;
use thiserror::Error;

use crate::agent::{ReadyInfo, READY_FILE};
use crate::client::{Client, ClientError};
use crate::config::{AgentConfig, CapacityConfig, PlacementSection, SwimSection};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cluster io: {0}")]
    Io(#[from] std::io::Error),
    #[error("agent {0} did not become ready: {1}")]
    NotReady(u32, String),
    #[error("cluster did not converge within {0:?}")]
    NoConvergence(Duration),
    #[error("no agent {0}")]
    NoSuchNode(u32),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// How to build a desk cluster.
#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub agent_bin: PathBuf,
    pub nodes: u32,
    pub capacity: Option<CapacityConfig>,
    /// Per-node capacity overrides, by node id.
    pub node_capacity: Vec<(u32, CapacityConfig)>,
    pub swim: SwimSection,
    pub placement: PlacementSection,
    pub emulated_link_delay_ms: u64,
    /// Value of NEFELE_LOG for the agents.
    pub log: String,
}

impl ClusterOptions {
    pub fn new(agent_bin: impl Into<PathBuf>, nodes: u32) -> Self {
        Self {
            agent_bin: agent_bin.into(),
            nodes,
            capacity: None,
            node_capacity: Vec::new(),
            swim: SwimSection::default(),
            placement: PlacementSection::default(),
            emulated_link_delay_ms: 0,
            log: "warn".into(),
        }
    }

    pub fn capacity(mut self, cpu_mc: u64, mem_bytes: u64) -> Self {
        self.capacity = Some(CapacityConfig { cpu_mc, mem_bytes });
        self
    }

    pub fn node_capacity(mut self, node: u32, cpu_mc: u64, mem_bytes: u64) -> Self {
        self.node_capacity.push((node, CapacityConfig { cpu_mc, mem_bytes }));
        self
    }

    pub fn admission_workers(mut self, n: usize) -> Self {
        self.placement.admission_workers = n;
        self
    }

    pub fn link_delay_ms(mut self, ms: u64) -> Self {
        self.emulated_link_delay_ms = ms;
        self
    }
}

/// `nefele-agent` next to the running executable (also works from a test
/// binary in `target/<profile>/deps`).
pub fn sibling_agent_bin() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let mut dir = exe.parent()?;
    for _ in 0..2 {
        let cand = dir.join("nefele-agent");
        if cand.is_file() {
            return Some(cand);
        }
        dir = dir.parent()?;
    }
    None
}

pub struct Member {
    pub id: u32,
    pub config: AgentConfig,
    pub ready: Option<ReadyInfo>,
    child: Option<Child>,
}

impl Member {
    pub fn socket(&self) -> PathBuf {
        self.config.socket_path()
    }

    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    pub fn is_running(&self) -> bool {
        self.child.is_some()
    }
}

pub struct DeskCluster {
    opts: ClusterOptions,
    root: tempfile::TempDir,
    members: Vec<Member>,
}

impl DeskCluster {
    /// Starts node 1, then the rest seeded with node 1's gossip address, and
    /// waits until every agent sees every other as alive.
    pub fn launch(opts: ClusterOptions) -> Result<DeskCluster, ClusterError> {
        let root = tempfile::Builder::new().prefix("nefele-desk-").tempdir()?;
        let mut c = DeskCluster { opts, root, members: Vec::new() };
        for id in 1..=c.opts.nodes {
            let cfg = c.config_for(id);
            c.members.push(Member { id, config: cfg, ready: None, child: None });
            c.start(id)?;
        }
        c.wait_converged(Duration::from_secs(10 + c.opts.nodes as u64))?;
        Ok(c)
    }

    fn config_for(&self, id: u32) -> AgentConfig {
        let loopback = "127.0.0.1:0".parse().expect("literal");
        let seeds = self
            .members
            .first()
            .and_then(|m| m.ready.as_ref())
            .map(|r| vec![r.addrs.gossip.to_string()])
            .unwrap_or_default();
        let capacity = self.opts.node_capacity.iter().find(|(n, _)| *n == id).map(|(_, c)| *c).or(self.opts.capacity);
        AgentConfig {
            node_id: id,
            gossip_addr: loopback,
            peer_addr: loopback,
            http_addr: loopback,
            control_socket: None,
            data_dir: self.root.path().join(format!("node{id}")),
            seeds,
            capacity,
            swim: self.opts.swim.clone(),
            placement: self.opts.placement.clone(),
            emulated_link_delay_ms: self.opts.emulated_link_delay_ms,
            ..AgentConfig::default()
        }
    }

    fn member_mut(&mut self, id: u32) -> Result<&mut Member, ClusterError> {
        self.members.iter_mut().find(|m| m.id == id).ok_or(ClusterError::NoSuchNode(id))
    }

    pub fn member(&self, id: u32) -> Result<&Member, ClusterError> {
        self.members.iter().find(|m| m.id == id).ok_or(ClusterError::NoSuchNode(id))
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn ids(&self) -> Vec<u32> {
        self.members.iter().map(|m| m.id).collect()
    }

    pub fn root(&self) -> &Path {
        self.root.path()
    }

    /// Starts (or restarts) agent `id` and waits for its ready file.
    pub fn start(&mut self, id: u32) -> Result<(), ClusterError> {
        let bin = self.opts.agent_bin.clone();
        let log = self.opts.log.clone();
        let mut cfg = self.member(id)?.config.clone();
        if id != 1 {
            // Node 1 may have restarted on new ports.
            cfg.seeds = self.config_for(id).seeds;
        }
        std::fs::create_dir_all(&cfg.data_dir)?;
        let ready_path = cfg.data_dir.join(READY_FILE);
        let _ = std::fs::remove_file(&ready_path);
        let cfg_path = cfg.data_dir.join("agent.toml");
        std::fs::write(&cfg_path, toml::to_string(&cfg).map_err(|e| std::io::Error::other(e.to_string()))?)?;
        let stderr = std::fs::OpenOptions::new().create(true).append(true).open(cfg.data_dir.join("agent.log"))?;
        let child = Command::new(&bin)
            .arg("--config")
            .arg(&cfg_path)
            .env("NEFELE_LOG", log)
            .env_remove("NEFELE_SOCK")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(stderr)
            .spawn()?;
        let m = self.member_mut(id)?;
        m.config = cfg;
        m.child = Some(child);
        m.ready = None;
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            if let Ok(text) = std::fs::read_to_string(&ready_path) {
                if let Ok(r) = serde_json::from_str::<ReadyInfo>(&text) {
                    m.ready = Some(r);
                    return Ok(());
                }
            }
            if let Some(Ok(Some(status))) = m.child.as_mut().map(Child::try_wait) {
                m.child = None;
                return Err(ClusterError::NotReady(id, format!("agent exited with {status}")));
            }
            if Instant::now() > deadline {
                return Err(ClusterError::NotReady(id, "timed out waiting for the ready file".into()));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    fn signal(&mut self, id: u32, sig: Signal) -> Result<Option<Child>, ClusterError> {
        let m = self.member_mut(id)?;
        let Some(child) = m.child.take() else { return Ok(None) };
        let _ = kill(Pid::from_raw(child.id() as i32), sig);
        Ok(Some(child))
    }

    /// SIGKILLs agent `id`; its processes are left running, as after a
    /// machine failure the host would have lost them anyway.
    pub fn kill(&mut self, id: u32) -> Result<(), ClusterError> {
        if let Some(mut child) = self.signal(id, Signal::SIGKILL)? {
            let _ = child.wait();
        }
        Ok(())
    }

    /// SIGTERMs agent `id` and waits for a clean exit.
    pub fn stop(&mut self, id: u32) -> Result<(), ClusterError> {
        if let Some(mut child) = self.signal(id, Signal::SIGTERM)? {
            let deadline = Instant::now() + Duration::from_secs(5);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return Ok(());
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
        Ok(())
    }

    pub async fn client(&self, id: u32) -> Result<Client, ClusterError> {
        Ok(Client::connect(self.member(id)?.socket()).await?)
    }

    /// Waits until every running agent reports every running agent alive.
    /// Safe to call from inside a tokio runtime: the polling runs on its own
    /// thread.
    pub fn wait_converged(&self, timeout: Duration) -> Result<(), ClusterError> {
        let running: Vec<(u32, PathBuf)> =
            self.members.iter().filter(|m| m.is_running()).map(|m| (m.id, m.socket())).collect();
        std::thread::scope(|s| s.spawn(|| converge(&running, timeout)).join().expect("convergence thread"))
    }

    /// Contents of agent `id`'s stderr log, for diagnostics.
    pub fn agent_log(&self, id: u32) -> String {
        self.member(id)
            .ok()
            .and_then(|m| std::fs::read_to_string(m.config.data_dir.join("agent.log")).ok())
            .unwrap_or_default()
    }
}

fn converge(running: &[(u32, PathBuf)], timeout: Duration) -> Result<(), ClusterError> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let ids: Vec<u32> = running.iter().map(|(id, _)| *id).collect();
    let deadline = Instant::now() + timeout;
    loop {
        let ok = rt.block_on(async {
            for (_, sock) in running {
                let Ok(c) = Client::connect(sock).await else { return false };
                let Ok(nodes) = c.nodes().await else { return false };
                let alive: Vec<u32> = nodes.iter().filter(|n| n.status == Status::Alive).map(|n| n.node.id).collect();
                if !ids.iter().all(|r| alive.contains(r)) {
                    return false;
                }
            }
            true
        });
        if ok {
            return Ok(());
        }
        if Instant::now() > deadline {
            return Err(ClusterError::NoConvergence(timeout));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

impl Drop for DeskCluster {
    fn drop(&mut self) {
        let ids = self.ids();
        for id in &ids {
            if let Ok(Some(child)) = self.signal(*id, Signal::SIGTERM) {
                self.member_mut(*id).expect("member").child = Some(child);
            }
        }
        let deadline = Instant::now() + Duration::from_secs(3);
        for m in &mut self.members {
            if let Some(mut child) = m.child.take() {
                loop {
                    if let Ok(Some(_)) = child.try_wait() {
                        break;
                    }
                    if Instant::now() > deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        }
    }
}
