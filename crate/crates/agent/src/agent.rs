//! Agent startup and shutdown.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nefele_core::membership::Swim;
use nefele_core::NodeId;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, UdpSocket, UnixListener};
use tokio::task::JoinHandle;
use tracing::info;

use crate::config::AgentConfig;
use crate::node::{lock, BoundAddrs, Node};

#[derive(Debug, Error)]
pub enum StartError {
    #[error("invalid configuration: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("binding {what} on {addr}: {source}")]
    Bind { what: &'static str, addr: String, source: std::io::Error },
    #[error("data directory {path}: {source}")]
    DataDir { path: PathBuf, source: std::io::Error },
}

/// Written to `<data_dir>/ready.json` once every listener is bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadyInfo {
    pub node: NodeId,
    pub addrs: BoundAddrs,
    pub control_socket: PathBuf,
    pub pid: u32,
}

pub const READY_FILE: &str = "ready.json";

pub struct Agent {
    pub node: Arc<Node>,
    tasks: Vec<JoinHandle<()>>,
    ready_path: PathBuf,
}

/// Bumps and persists the restart counter; each start is a new incarnation.
fn next_incarnation(dir: &Path) -> std::io::Result<u32> {
    let path = dir.join("incarnation");
    let prev = std::fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok()).unwrap_or(0);
    let next = prev.checked_add(1).unwrap_or(1);
    std::fs::write(&path, next.to_string())?;
    Ok(next)
}

fn bind_err(what: &'static str, addr: impl ToString) -> impl FnOnce(std::io::Error) -> StartError {
    let addr = addr.to_string();
    move |source| StartError::Bind { what, addr, source }
}

fn bind_unix(path: &Path) -> Result<UnixListener, StartError> {
    if path.exists() && std::os::unix::net::UnixStream::connect(path).is_err() {
        // Left over from an agent that did not shut down cleanly.
        let _ = std::fs::remove_file(path);
    }
    UnixListener::bind(path).map_err(bind_err("control socket", path.display()))
}

impl Agent {
    pub async fn start(cfg: AgentConfig) -> Result<Agent, StartError> {
        cfg.validate()?;
        let dir = cfg.data_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|source| StartError::DataDir { path: dir.clone(), source })?;
        let incarnation = next_incarnation(&dir).map_err(|source| StartError::DataDir { path: dir.clone(), source })?;
        let me = NodeId::new(cfg.node_id, incarnation);

        let gossip = UdpSocket::bind(cfg.gossip_addr).await.map_err(bind_err("gossip", cfg.gossip_addr))?;
        let peer = TcpListener::bind(cfg.peer_addr).await.map_err(bind_err("inter-node", cfg.peer_addr))?;
        let http = TcpListener::bind(cfg.http_addr).await.map_err(bind_err("http", cfg.http_addr))?;
        let local = |r: std::io::Result<SocketAddr>, what, addr: SocketAddr| r.map_err(bind_err(what, addr));
        let addrs = BoundAddrs {
            gossip: local(gossip.local_addr(), "gossip", cfg.gossip_addr)?,
            peer: local(peer.local_addr(), "inter-node", cfg.peer_addr)?,
            http: local(http.local_addr(), "http", cfg.http_addr)?,
        };
        let socket_path = cfg.socket_path();
        let control = bind_unix(&socket_path)?;

        let tags = BTreeMap::from([("peer".to_string(), addrs.peer.to_string()), ("http".to_string(), addrs.http.to_string())]);
        let seed = ((me.id as u64) << 32) | me.incarnation as u64;
        let swim = Swim::new(me, addrs.gossip.to_string(), cfg.swim.to_swim(), seed).with_tags(tags);
        let (node, ch) = Node::new(cfg, me, addrs, swim);

        let tasks = vec![
            tokio::spawn(node.clone().run_gossip(gossip, ch.gossip_out)),
            tokio::spawn(node.clone().accept_peers(peer)),
            tokio::spawn(node.clone().serve_control(control)),
            tokio::spawn(crate::http::serve(node.clone(), http)),
            tokio::spawn(node.clone().run_reaper(ch.exits)),
            tokio::spawn(node.clone().run_admission(ch.admit)),
            tokio::spawn(node.clone().run_sampler()),
            tokio::spawn(node.clone().run_sweeper()),
        ];

        let ready = ReadyInfo { node: me, addrs, control_socket: socket_path, pid: std::process::id() };
        let ready_path = dir.join(READY_FILE);
        let text = serde_json::to_string_pretty(&ready).expect("serializable");
        std::fs::write(&ready_path, text).map_err(|source| StartError::DataDir { path: ready_path.clone(), source })?;
        info!(node = %me, gossip = %addrs.gossip, peer = %addrs.peer, http = %addrs.http, "agent started");
        Ok(Agent { node, tasks, ready_path })
    }

    /// Kills local processes (their watchers get DOWNs), announces the
    /// departure, and stops every subsystem.
    pub async fn shutdown(self) {
        let node = self.node;
        node.kill_all_local();
        let deadline = Instant::now() + Duration::from_secs(1);
        while lock(&node.procs).live_count() > 0 && Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        // Let DOWN frames to remote watchers drain before links close.
        tokio::time::sleep(Duration::from_millis(50)).await;
        node.shutdown.send_replace(true);
        // Gossip sends its leave on the shutdown signal; give it a moment.
        tokio::time::sleep(Duration::from_millis(50)).await;
        for t in self.tasks {
            t.abort();
        }
        let _ = std::fs::remove_file(&node.socket_path);
        let _ = std::fs::remove_file(&self.ready_path);
        info!(node = %node.me, "agent stopped");
    }
}

/// Runs an agent until SIGTERM or SIGINT.
pub async fn run(cfg: AgentConfig) -> Result<(), StartError> {
    use tokio::signal::unix::{signal, SignalKind};
    let agent = Agent::start(cfg).await?;
    let mut term = signal(SignalKind::terminate()).map_err(bind_err("signal handler", "SIGTERM"))?;
    let mut int = signal(SignalKind::interrupt()).map_err(bind_err("signal handler", "SIGINT"))?;
    tokio::select! {
        _ = term.recv() => {}
        _ = int.recv() => {}
    }
    agent.shutdown().await;
    Ok(())
}
