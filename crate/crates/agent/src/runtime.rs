//! Local process table: spawning, output capture, exit reaping, signals,
//! monitors, and the socket handshake.

use std::collections::{HashMap, HashSet, VecDeque};
use std::os::unix::process::ExitStatusExt;
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use nefele_core::logbuf::{LogRecord, LogRing, LogStream};
use nefele_core::membership::Status;
use nefele_core::messaging::{DownNotice, DownReason};
use nefele_core::model::SPAWN_FAILURE_STATUS;
use nefele_core::{ExitOutcome, Npid, ProcessRecord, ProcessState, TaskSpec};
use nix::sys::signal::{self, Signal};
use nix::unistd::Pid;
use tokio::io::{AsyncBufReadExt, AsyncRead, BufReader};
use tokio::process::Command;
use tokio::sync::{broadcast, mpsc, watch};
use tracing::{debug, warn};

use crate::node::{lock, unix_ms, Node, Reach};
use crate::proto::{ErrorCode, PeerMsg, Scope};

/// Exited processes whose logs and tokens are kept around.
const EXITED_RETAINED: usize = 1024;
const FOLLOW_BUFFER: usize = 1024;

#[derive(Debug, Clone, Copy)]
pub struct ExitEvent {
    pub npid: Npid,
    pub outcome: ExitOutcome,
}

/// Log ring plus live followers of one process.
pub struct LogHub {
    ring: LogRing,
    tx: Option<broadcast::Sender<LogRecord>>,
    open_streams: u8,
    exited: bool,
}

impl LogHub {
    fn new(npid: Npid) -> Self {
        Self { ring: LogRing::new(npid), tx: Some(broadcast::channel(FOLLOW_BUFFER).0), open_streams: 2, exited: false }
    }

    fn push(&mut self, stream: LogStream, line: &[u8]) {
        let rec = self.ring.push(stream, line, unix_ms());
        if let Some(tx) = &self.tx {
            let _ = tx.send(rec);
        }
    }

    fn maybe_close(&mut self) {
        if self.exited && self.open_streams == 0 {
            self.ring.close();
            self.tx = None;
        }
    }

    fn stream_ended(&mut self) {
        self.open_streams = self.open_streams.saturating_sub(1);
        self.maybe_close();
    }

    fn process_ended(&mut self) {
        self.exited = true;
        self.maybe_close();
    }

    /// Buffered tail plus, when following, a receiver for later lines.
    /// Taken under one lock so no line is missed or repeated.
    fn open(&self, last_n: usize, follow: bool) -> (Vec<LogRecord>, Option<broadcast::Receiver<LogRecord>>) {
        let rx = if follow { self.tx.as_ref().map(|t| t.subscribe()) } else { None };
        (self.ring.tail(last_n), rx)
    }
}

struct ProcEntry {
    record: ProcessRecord,
    logs: Arc<Mutex<LogHub>>,
    state: watch::Sender<ProcessState>,
}

#[derive(Default)]
pub struct ProcTable {
    live: HashMap<Npid, ProcEntry>,
    tokens: HashMap<String, Npid>,
    /// Unused tokens of processes that have exited.
    spent: HashSet<String>,
    exited: HashMap<Npid, (ProcessRecord, Arc<Mutex<LogHub>>, Option<String>)>,
    exited_order: VecDeque<Npid>,
}

impl ProcTable {
    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Forgets watchers living on a node that died.
    pub fn drop_watchers_on(&mut self, node_id: u32) {
        for e in self.live.values_mut() {
            e.record.monitors.retain(|w| w.node.id != node_id);
        }
    }

    fn retain_exited(&mut self, record: ProcessRecord, logs: Arc<Mutex<LogHub>>, token: Option<String>) {
        let npid = record.npid;
        if let Some(t) = &token {
            self.spent.insert(t.clone());
        }
        self.exited.insert(npid, (record, logs, token));
        self.exited_order.push_back(npid);
        while self.exited_order.len() > EXITED_RETAINED {
            if let Some(old) = self.exited_order.pop_front() {
                if let Some((_, _, Some(t))) = self.exited.remove(&old) {
                    self.spent.remove(&t);
                }
            }
        }
    }
}

fn new_token() -> String {
    format!("{:032x}", rand::random::<u128>())
}

fn outcome_of(status: std::process::ExitStatus) -> ExitOutcome {
    match (status.code(), status.signal()) {
        (Some(c), _) => ExitOutcome::Status(c),
        (None, Some(s)) => ExitOutcome::Signal(s),
        (None, None) => ExitOutcome::Status(SPAWN_FAILURE_STATUS),
    }
}

async fn capture<R: AsyncRead + Unpin>(reader: R, stream: LogStream, hub: Arc<Mutex<LogHub>>) {
    let mut reader = BufReader::new(reader);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.read_until(b'\n', &mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                if buf.last() == Some(&b'\n') {
                    buf.pop();
                }
                lock(&hub).push(stream, &buf);
            }
        }
    }
    lock(&hub).stream_ended();
}

/// Outcome of a cluster-wide listing.
#[derive(Debug, Clone, Default)]
pub struct Listing {
    pub processes: Vec<ProcessRecord>,
    pub partial: bool,
    pub unreachable: Vec<u32>,
}

impl Node {
    /// Starts one task whose resources are already allocated on this node.
    /// On failure the allocation is returned and the reason reported.
    pub fn spawn_local(self: &Arc<Self>, tenant: &str, spec: TaskSpec) -> Result<(Npid, u32), String> {
        let npid = self.alloc_npid();
        let token = new_token();
        let mut cmd = Command::new(&spec.executable);
        cmd.args(&spec.args)
            .envs(&spec.env)
            .env("NEFELE_NPID", npid.to_string())
            .env("NEFELE_TOKEN", &token)
            .env("NEFELE_SOCK", &self.socket_path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let now = unix_ms();
        let mut record = ProcessRecord::new(npid, tenant.to_string(), spec.clone(), now);
        let logs = Arc::new(Mutex::new(LogHub::new(npid)));
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                lock(&self.ledger).deallocate(spec.resources);
                let _ = record.finish(ExitOutcome::Status(SPAWN_FAILURE_STATUS), now);
                lock(&logs).process_ended();
                lock(&self.procs).retain_exited(record, logs, None);
                return Err(format!("spawning {}: {e}", spec.executable));
            }
        };
        let os_pid = child.id().unwrap_or(0);
        record.os_pid = Some(os_pid);
        if !spec.await_handshake {
            let _ = record.mark_running();
        }
        let state = watch::channel(record.state).0;
        // The exit watcher starts only after the insert, so the exit event
        // always finds the entry.
        let mut procs = lock(&self.procs);
        procs.tokens.insert(token, npid);
        procs.live.insert(npid, ProcEntry { record, logs: logs.clone(), state });
        drop(procs);

        lock(&self.router).add_mailbox(npid, tenant);
        if !spec.await_handshake {
            self.on_running(npid, tenant, &spec);
        }
        if let Some(out) = child.stdout.take() {
            tokio::spawn(capture(out, LogStream::Stdout, logs.clone()));
        } else {
            lock(&logs).stream_ended();
        }
        if let Some(err) = child.stderr.take() {
            tokio::spawn(capture(err, LogStream::Stderr, logs));
        } else {
            lock(&logs).stream_ended();
        }
        let exit_tx = self.exit_tx.clone();
        tokio::spawn(async move {
            let outcome = match child.wait().await {
                Ok(st) => outcome_of(st),
                Err(e) => {
                    warn!(%npid, error = %e, "waiting for child");
                    ExitOutcome::Status(SPAWN_FAILURE_STATUS)
                }
            };
            let _ = exit_tx.send(ExitEvent { npid, outcome });
        });
        Ok((npid, os_pid))
    }

    fn on_running(self: &Arc<Self>, npid: Npid, tenant: &str, spec: &TaskSpec) {
        if let Some(name) = &spec.name {
            if let Err(e) = self.register(npid, tenant, nefele_core::messaging::NameKey::Name(name.clone())) {
                warn!(%npid, error = %e, "registering task name");
            }
        }
    }

    /// The single consumer of child exits on this node.
    pub async fn run_reaper(self: Arc<Self>, mut exits: mpsc::UnboundedReceiver<ExitEvent>) {
        while let Some(ev) = exits.recv().await {
            self.reap(ev);
        }
    }

    fn reap(self: &Arc<Self>, ev: ExitEvent) {
        let entry = {
            let mut procs = lock(&self.procs);
            let Some(mut entry) = procs.live.remove(&ev.npid) else { return };
            let token = procs.tokens.iter().find(|(_, n)| **n == ev.npid).map(|(t, _)| t.clone());
            if let Some(t) = &token {
                procs.tokens.remove(t);
            }
            if entry.record.finish(ev.outcome, unix_ms()).is_err() {
                return;
            }
            procs.retain_exited(entry.record.clone(), entry.logs.clone(), token);
            entry
        };
        lock(&self.ledger).deallocate(entry.record.spec.resources);
        // Names and mailbox go first: nothing reaches the process once its
        // DOWN is out.
        self.remove_mailbox(ev.npid);
        let notice = DownNotice::from_exit(ev.npid, ev.outcome);
        for w in &entry.record.monitors {
            self.deliver_down(*w, notice.clone());
        }
        lock(&entry.logs).process_ended();
        entry.state.send_replace(entry.record.state);
        debug!(npid = %ev.npid, outcome = ?ev.outcome, "process ended");
    }

    /// Binds a socket session to the process holding `token`.
    pub fn handshake(self: &Arc<Self>, token: &str, os_pid: Option<u32>) -> Result<(Npid, String), ErrorCode> {
        let (npid, tenant, spec, became_running) = {
            let mut procs = lock(&self.procs);
            let Some(npid) = procs.tokens.remove(token) else {
                return Err(if procs.spent.remove(token) { ErrorCode::Gone } else { ErrorCode::BadToken });
            };
            let Some(entry) = procs.live.get_mut(&npid) else { return Err(ErrorCode::Gone) };
            if os_pid.is_some() && os_pid != entry.record.os_pid {
                debug!(%npid, ?os_pid, expected = ?entry.record.os_pid, "handshake from a descendant process");
            }
            let was = entry.record.state;
            let _ = entry.record.mark_running();
            entry.state.send_replace(entry.record.state);
            (npid, entry.record.tenant.clone(), entry.record.spec.clone(), was == ProcessState::Starting)
        };
        if became_running {
            self.on_running(npid, &tenant, &spec);
        }
        Ok((npid, tenant))
    }

    pub fn watch_state(&self, npid: &Npid) -> Option<watch::Receiver<ProcessState>> {
        lock(&self.procs).live.get(npid).map(|e| e.state.subscribe())
    }

    pub fn local_record(&self, npid: &Npid) -> Option<ProcessRecord> {
        let procs = lock(&self.procs);
        procs.live.get(npid).map(|e| e.record.clone()).or_else(|| procs.exited.get(npid).map(|e| e.0.clone()))
    }

    fn signal_local(&self, npid: Npid, signo: i32) -> Result<(), ErrorCode> {
        let sig = Signal::try_from(signo).map_err(|_| ErrorCode::BadRequest)?;
        let os_pid = {
            let procs = lock(&self.procs);
            procs.live.get(&npid).and_then(|e| e.record.os_pid).ok_or(ErrorCode::NoSuchProcess)?
        };
        signal::kill(Pid::from_raw(os_pid as i32), sig).map_err(|_| ErrorCode::NoSuchProcess)
    }

    /// Delivers `signo` to a process anywhere in the cluster.
    pub async fn signal(self: &Arc<Self>, npid: Npid, signo: i32) -> Result<(), ErrorCode> {
        match self.reachability(npid.node) {
            Reach::Local => self.signal_local(npid, signo),
            Reach::Remote(node) => {
                match self.peer_request(node.id, PeerMsg::Kill { npid, signal: signo }, Duration::from_secs(2)).await {
                    Ok(PeerMsg::KillAck { error: None }) => Ok(()),
                    Ok(PeerMsg::KillAck { error: Some(code) }) => Err(code),
                    Ok(_) => Err(ErrorCode::Internal),
                    Err(_) => Err(ErrorCode::Unreachable),
                }
            }
            Reach::Dead => Err(ErrorCode::Unreachable),
            Reach::Stale | Reach::Unknown => Err(ErrorCode::NoSuchProcess),
        }
    }

    pub fn handle_kill(&self, npid: Npid, signo: i32) -> Option<ErrorCode> {
        if !self.is_local(&npid) {
            return Some(ErrorCode::NoSuchProcess);
        }
        self.signal_local(npid, signo).err()
    }

    /// Registers `watcher` for one DOWN when `target` ends.
    pub async fn monitor(self: &Arc<Self>, watcher: Npid, target: Npid) {
        match self.reachability(target.node) {
            Reach::Local => self.add_local_monitor(watcher, target),
            Reach::Remote(node) => {
                self.note_remote_watch(watcher, target);
                if self.peer_send(node.id, PeerMsg::Monitor { watcher, target }).await.is_err() {
                    // The owner is unreachable now; membership will report
                    // it Dead (and deliver nodedown) or the link recovers.
                    debug!(%target, "monitor request not sent");
                    if self.member(node.id).map(|m| m.status) == Some(Status::Dead) {
                        self.receive_down(watcher, DownNotice::without_process(target, DownReason::Nodedown));
                    }
                }
            }
            Reach::Dead => self.deliver_down(watcher, DownNotice::without_process(target, DownReason::Nodedown)),
            Reach::Stale | Reach::Unknown => {
                self.deliver_down(watcher, DownNotice::without_process(target, DownReason::Noproc))
            }
        }
    }

    /// Owner side of a monitor registration.
    pub fn add_local_monitor(self: &Arc<Self>, watcher: Npid, target: Npid) {
        let registered = {
            let mut procs = lock(&self.procs);
            match procs.live.get_mut(&target) {
                Some(e) => {
                    e.record.monitors.insert(watcher);
                    true
                }
                None => false,
            }
        };
        if !registered {
            self.deliver_down(watcher, DownNotice::without_process(target, DownReason::Noproc));
        }
    }

    pub fn ps_local(&self, tenant: Option<&str>) -> Vec<ProcessRecord> {
        let procs = lock(&self.procs);
        let mut out: Vec<ProcessRecord> = procs
            .live
            .values()
            .filter(|e| tenant.is_none_or(|t| e.record.tenant == t))
            .map(|e| e.record.clone())
            .collect();
        out.sort_by_key(|r| r.npid);
        out
    }

    pub async fn ps(self: &Arc<Self>, scope: Scope, tenant: Option<String>) -> Listing {
        let mut listing = Listing { processes: self.ps_local(tenant.as_deref()), ..Default::default() };
        if scope == Scope::Local {
            return listing;
        }
        let members = lock(&self.swim).members();
        let alive: Vec<u32> = members.iter().filter(|m| m.status == Status::Alive).map(|m| m.node.id).collect();
        let mut asks = Vec::new();
        for m in members.into_iter().filter(|m| m.node.id != self.me.id) {
            if m.status != Status::Alive {
                // A stale incarnation of a node that has since rejoined is not a gap.
                if !alive.contains(&m.node.id) {
                    listing.unreachable.push(m.node.id);
                }
                continue;
            }
            let node = self.clone();
            let tenant = tenant.clone();
            asks.push(tokio::spawn(async move {
                let r = node.peer_request(m.node.id, PeerMsg::Ps { tenant }, Duration::from_secs(1)).await;
                (m.node.id, r)
            }));
        }
        for a in asks {
            match a.await {
                Ok((_, Ok(PeerMsg::PsResult { processes }))) => listing.processes.extend(processes),
                Ok((id, _)) => listing.unreachable.push(id),
                Err(_) => listing.partial = true,
            }
        }
        listing.partial |= !listing.unreachable.is_empty();
        listing.unreachable.sort_unstable();
        listing.unreachable.dedup();
        listing.processes.sort_by_key(|r| r.npid);
        listing
    }

    fn open_local_logs(&self, npid: &Npid, last_n: usize, follow: bool) -> (Vec<LogRecord>, Option<broadcast::Receiver<LogRecord>>) {
        let hub = {
            let procs = lock(&self.procs);
            procs.live.get(npid).map(|e| e.logs.clone()).or_else(|| procs.exited.get(npid).map(|e| e.1.clone()))
        };
        match hub {
            Some(h) => lock(&h).open(last_n, follow),
            None => (Vec::new(), None),
        }
    }

    /// Streams a process's logs from wherever it runs. The channel closes
    /// at the end of the stream; unknown processes give an empty stream.
    pub async fn logs(self: &Arc<Self>, npid: Npid, follow: bool, last_n: Option<usize>) -> mpsc::UnboundedReceiver<LogRecord> {
        let (tx, rx) = mpsc::unbounded_channel();
        let last_n = last_n.unwrap_or(usize::MAX);
        match self.reachability(npid.node) {
            Reach::Local => {
                let (tail, live) = self.open_local_logs(&npid, last_n, follow);
                tokio::spawn(forward_logs(tail, live, move |r| tx.send(r).is_ok()));
            }
            Reach::Remote(node) => {
                if let Ok(mut stream) = self.peer_stream(node.id, PeerMsg::Logs { npid, follow, last_n: Some(last_n) }).await {
                    tokio::spawn(async move {
                        while let Some(PeerMsg::Log { record }) = stream.recv().await {
                            if tx.send(record).is_err() {
                                return;
                            }
                        }
                    });
                }
            }
            _ => {}
        }
        rx
    }

    /// Owner side of a remote log request.
    pub fn serve_logs(&self, conn: Arc<crate::peers::PeerConn>, id: Option<u64>, npid: Npid, follow: bool, last_n: Option<usize>) {
        let (tail, live) = self.open_local_logs(&npid, last_n.unwrap_or(usize::MAX), follow);
        tokio::spawn(async move {
            let c = conn.clone();
            forward_logs(tail, live, move |record| {
                c.reply(id, PeerMsg::Log { record });
                !c.is_closed()
            })
            .await;
            conn.reply(id, PeerMsg::LogEnd);
        });
    }

    /// SIGKILLs every local process group (agent shutdown).
    pub fn kill_all_local(&self) {
        let pids: Vec<u32> = lock(&self.procs).live.values().filter_map(|e| e.record.os_pid).collect();
        for pid in pids {
            let _ = signal::killpg(Pid::from_raw(pid as i32), Signal::SIGKILL);
        }
    }
}

async fn forward_logs<F>(tail: Vec<LogRecord>, live: Option<broadcast::Receiver<LogRecord>>, mut emit: F)
where
    F: FnMut(LogRecord) -> bool,
{
    let last_seen: [u64; 2] = {
        let mut s = [0, 0];
        for r in &tail {
            s[r.stream as usize] = r.seq;
        }
        s
    };
    for r in tail {
        if !emit(r) {
            return;
        }
    }
    let Some(mut live) = live else { return };
    let mut seen = last_seen;
    loop {
        match live.recv().await {
            Ok(r) => {
                let i = r.stream as usize;
                if r.seq <= seen[i] {
                    continue;
                }
                seen[i] = r.seq;
                if !emit(r) {
                    return;
                }
            }
            Err(broadcast::error::RecvError::Lagged(n)) => warn!(skipped = n, "log follower lagged"),
            Err(broadcast::error::RecvError::Closed) => return,
        }
    }
}
