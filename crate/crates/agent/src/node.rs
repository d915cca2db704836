//! Shared per-node state. Each subsystem owns one field behind its own lock;
//! locks are never held across an await point.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use nefele_core::membership::{MemberState, Outbound, Status, Swim};
use nefele_core::placement::NodeLedger;
use nefele_core::{NodeId, Npid, ResourceVector, SpawnRequest};
use tokio::sync::{mpsc, watch};
use uuid::Uuid;

use crate::admission::RequestEntry;
use crate::config::AgentConfig;
use crate::peers::Peers;
use crate::router::Router;
use crate::runtime::{ExitEvent, ProcTable};

/// Addresses the agent actually bound (port 0 resolves here).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BoundAddrs {
    pub gossip: SocketAddr,
    pub peer: SocketAddr,
    pub http: SocketAddr,
}

/// Reservation converted into allocation, waiting for its deploy.
#[derive(Debug, Clone, Copy)]
pub struct Committed {
    pub per_task: ResourceVector,
    pub remaining: u64,
    pub at: Instant,
}

pub struct Node {
    pub cfg: AgentConfig,
    pub me: NodeId,
    pub addrs: BoundAddrs,
    pub socket_path: PathBuf,
    started: Instant,
    next_seq: AtomicU64,
    pub swim: Mutex<Swim>,
    pub gossip_out: mpsc::UnboundedSender<Vec<Outbound>>,
    pub ledger: Mutex<NodeLedger>,
    pub committed: Mutex<HashMap<Uuid, Committed>>,
    pub procs: Mutex<ProcTable>,
    pub router: Mutex<Router>,
    /// Bumped on every name-table change; waiters watch it.
    pub names_version: watch::Sender<u64>,
    pub peers: Peers,
    pub requests: Mutex<HashMap<Uuid, RequestEntry>>,
    pub admit_tx: mpsc::UnboundedSender<SpawnRequest>,
    pub exit_tx: mpsc::UnboundedSender<ExitEvent>,
    pub shutdown: watch::Sender<bool>,
}

/// Receivers handed to the background tasks at startup.
pub struct NodeChannels {
    pub gossip_out: mpsc::UnboundedReceiver<Vec<Outbound>>,
    pub admit: mpsc::UnboundedReceiver<SpawnRequest>,
    pub exits: mpsc::UnboundedReceiver<ExitEvent>,
}

/// Locks a mutex, ignoring poisoning (a panicked task must not wedge the node).
pub fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn unix_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

pub fn unix_ms() -> u64 {
    unix_us() / 1000
}

impl Node {
    pub fn new(cfg: AgentConfig, me: NodeId, addrs: BoundAddrs, swim: Swim) -> (Arc<Node>, NodeChannels) {
        let (gossip_tx, gossip_rx) = mpsc::unbounded_channel();
        let (admit_tx, admit_rx) = mpsc::unbounded_channel();
        let (exit_tx, exit_rx) = mpsc::unbounded_channel();
        let ledger = NodeLedger::new(me, cfg.effective_capacity());
        let node = Node {
            socket_path: cfg.socket_path(),
            me,
            addrs,
            started: Instant::now(),
            next_seq: AtomicU64::new(1),
            swim: Mutex::new(swim),
            gossip_out: gossip_tx,
            ledger: Mutex::new(ledger),
            committed: Mutex::new(HashMap::new()),
            procs: Mutex::new(ProcTable::default()),
            router: Mutex::new(Router::new(me)),
            names_version: watch::channel(0).0,
            peers: Peers::new(Duration::from_millis(cfg.emulated_link_delay_ms)),
            requests: Mutex::new(HashMap::new()),
            admit_tx,
            exit_tx,
            shutdown: watch::channel(false).0,
            cfg,
        };
        (Arc::new(node), NodeChannels { gossip_out: gossip_rx, admit: admit_rx, exits: exit_rx })
    }

    /// Monotonic time since the agent started; the clock for membership and
    /// reservations.
    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn alloc_npid(&self) -> Npid {
        let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        Npid::new(self.me, seq).expect("sequence space exhausted")
    }

    pub fn is_local(&self, npid: &Npid) -> bool {
        npid.node == self.me
    }

    pub fn alive_members(&self) -> Vec<MemberState> {
        lock(&self.swim).alive_members()
    }

    pub fn alive_peers(&self) -> Vec<NodeId> {
        self.alive_members().into_iter().map(|m| m.node).filter(|n| n.id != self.me.id).collect()
    }

    pub fn member(&self, id: u32) -> Option<MemberState> {
        lock(&self.swim).member(id)
    }

    /// Where a process on `node` can be reached, if that incarnation is live.
    pub fn reachability(&self, node: NodeId) -> Reach {
        if node == self.me {
            return Reach::Local;
        }
        match self.member(node.id) {
            Some(m) if m.node.incarnation > node.incarnation => Reach::Stale,
            Some(m) if m.node.incarnation < node.incarnation => Reach::Unknown,
            Some(m) if m.status == Status::Dead => Reach::Dead,
            Some(m) => match m.tags.get("peer") {
                Some(_) => Reach::Remote(m.node),
                None => Reach::Unknown,
            },
            None if node.id == self.me.id => Reach::Stale,
            None => Reach::Unknown,
        }
    }

    pub fn peer_addr_of(&self, id: u32) -> Option<String> {
        self.member(id).and_then(|m| m.tags.get("peer").cloned())
    }

    pub fn is_shutting_down(&self) -> bool {
        *self.shutdown.borrow()
    }

    pub fn bump_names(&self) {
        self.names_version.send_modify(|v| *v += 1);
    }
}

/// Routing verdict for a node identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reach {
    Local,
    Remote(NodeId),
    /// A newer incarnation of the node exists: the identity is gone for good.
    Stale,
    Dead,
    Unknown,
}
