//! Async client for the control socket. Requests are multiplexed over one
//! connection and matched to responses by id.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use nefele_core::logbuf::LogRecord;
use nefele_core::messaging::{NameKey, NameTableEntry};
use nefele_core::{Npid, ProcessRecord, SpawnKind, SpawnRequest, TaskSpec};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::UnixStream;
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::node::lock;
use crate::proto::{CtlRequest, CtlResponse, Dest, ErrorCode, NodeView, Req, RequestStatus, Resp, Scope};
use crate::wire;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connecting to {path}: {source}")]
    Connect { path: PathBuf, source: std::io::Error },
    #[error("NEFELE_SOCK is not set")]
    NoSocket,
    #[error("connection to the agent closed")]
    Closed,
    #[error("{code}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected response: {0}")]
    Unexpected(String),
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }
}

type Pending = Arc<Mutex<HashMap<u64, mpsc::UnboundedSender<CtlResponse>>>>;

pub struct Client {
    tx: mpsc::UnboundedSender<Vec<u8>>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    next_id: AtomicU64,
}

fn is_final(r: &CtlResponse) -> bool {
    !matches!(r, CtlResponse::Log(_))
}

fn unexpected(r: CtlResponse) -> ClientError {
    match r {
        CtlResponse::Error { code, message } => ClientError::Remote { code, message },
        other => ClientError::Unexpected(format!("{other:?}")),
    }
}

/// Listing returned by `ps`.
#[derive(Debug, Clone)]
pub struct PsListing {
    pub processes: Vec<ProcessRecord>,
    pub partial: bool,
    pub unreachable: Vec<u32>,
}

impl Client {
    pub async fn connect(path: impl AsRef<Path>) -> Result<Client, ClientError> {
        let path = path.as_ref();
        let stream = UnixStream::connect(path)
            .await
            .map_err(|source| ClientError::Connect { path: path.to_path_buf(), source })?;
        let (mut r, mut w) = stream.into_split();
        let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
        tokio::spawn(async move {
            while let Some(b) = rx.recv().await {
                if w.write_all(&b).await.is_err() {
                    return;
                }
            }
            let _ = w.shutdown().await;
        });
        let pending: Pending = Arc::new(Mutex::new(HashMap::new()));
        let p = pending.clone();
        let closed = Arc::new(AtomicBool::new(false));
        let c = closed.clone();
        tokio::spawn(async move {
            while let Ok(Some(resp)) = wire::read_frame::<_, Resp<CtlResponse>>(&mut r).await {
                let Some(re) = resp.re else { continue };
                let mut p = lock(&p);
                if let Some(tx) = p.get(&re) {
                    let fin = is_final(&resp.body);
                    let _ = tx.send(resp.body);
                    if fin {
                        p.remove(&re);
                    }
                }
            }
            c.store(true, Ordering::SeqCst);
            lock(&p).clear();
        });
        Ok(Client { tx, pending, closed, next_id: AtomicU64::new(1) })
    }

    /// Connects to the socket named by `NEFELE_SOCK`.
    pub async fn from_env() -> Result<Client, ClientError> {
        let path = std::env::var_os("NEFELE_SOCK").ok_or(ClientError::NoSocket)?;
        Client::connect(PathBuf::from(path)).await
    }

    /// Sends a request; responses arrive on the returned channel.
    pub fn stream(&self, body: CtlRequest) -> Result<mpsc::UnboundedReceiver<CtlResponse>, ClientError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::unbounded_channel();
        lock(&self.pending).insert(id, tx);
        if self.closed.load(Ordering::SeqCst) {
            lock(&self.pending).remove(&id);
            return Err(ClientError::Closed);
        }
        let bytes = wire::encode(&Req { id: Some(id), body }).map_err(|e| ClientError::Unexpected(e.to_string()))?;
        if self.tx.send(bytes).is_err() {
            lock(&self.pending).remove(&id);
            return Err(ClientError::Closed);
        }
        Ok(rx)
    }

    pub async fn request(&self, body: CtlRequest) -> Result<CtlResponse, ClientError> {
        let mut rx = self.stream(body)?;
        rx.recv().await.ok_or(ClientError::Closed)
    }

    async fn expect_ok(&self, body: CtlRequest) -> Result<(), ClientError> {
        match self.request(body).await? {
            CtlResponse::Ok => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    pub async fn hello(&self, token: &str, os_pid: Option<u32>) -> Result<(Npid, String), ClientError> {
        match self.request(CtlRequest::Hello { token: token.to_string(), os_pid }).await? {
            CtlResponse::Ack { npid, tenant } => Ok((npid, tenant)),
            other => Err(unexpected(other)),
        }
    }

    /// Takes an ephemeral identity so this session can send, receive, and
    /// monitor.
    pub async fn attach(&self, tenant: Option<&str>) -> Result<Npid, ClientError> {
        match self.request(CtlRequest::Attach { tenant: tenant.map(str::to_string) }).await? {
            CtlResponse::Ack { npid, .. } => Ok(npid),
            other => Err(unexpected(other)),
        }
    }

    /// Submits a request and waits for the placement decision.
    pub async fn submit(&self, req: SpawnRequest) -> Result<RequestStatus, ClientError> {
        let (tenant, request_id) = (Some(req.tenant), Some(req.request_id));
        let body = match req.kind {
            SpawnKind::Spawn if req.tasks.len() == 1 => {
                CtlRequest::Spawn { tenant, request_id, task: req.tasks.into_iter().next().expect("one task") }
            }
            SpawnKind::Nspawn if !req.tasks.is_empty() => {
                let count = req.tasks.len();
                CtlRequest::Nspawn { tenant, request_id, task: req.tasks.into_iter().next().expect("non-empty"), count }
            }
            _ => CtlRequest::Cspawn { tenant, request_id, tasks: req.tasks },
        };
        match self.request(body).await? {
            CtlResponse::SpawnResult(st) => Ok(st),
            other => Err(unexpected(other)),
        }
    }

    pub async fn spawn(&self, task: TaskSpec) -> Result<RequestStatus, ClientError> {
        self.request_spawn(CtlRequest::Spawn { tenant: None, request_id: None, task }).await
    }

    pub async fn nspawn(&self, task: TaskSpec, count: usize) -> Result<RequestStatus, ClientError> {
        self.request_spawn(CtlRequest::Nspawn { tenant: None, request_id: None, task, count }).await
    }

    pub async fn cspawn(&self, tasks: Vec<TaskSpec>) -> Result<RequestStatus, ClientError> {
        self.request_spawn(CtlRequest::Cspawn { tenant: None, request_id: None, tasks }).await
    }

    async fn request_spawn(&self, body: CtlRequest) -> Result<RequestStatus, ClientError> {
        match self.request(body).await? {
            CtlResponse::SpawnResult(st) => Ok(st),
            other => Err(unexpected(other)),
        }
    }

    pub async fn kill(&self, npid: Npid, signal: i32) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Kill { npid, signal }).await
    }

    pub async fn monitor(&self, target: Npid) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Monitor { target }).await
    }

    pub async fn ps(&self, scope: Scope, tenant: Option<&str>) -> Result<PsListing, ClientError> {
        match self.request(CtlRequest::Ps { scope, tenant: tenant.map(str::to_string) }).await? {
            CtlResponse::PsResult { processes, partial, unreachable } => Ok(PsListing { processes, partial, unreachable }),
            other => Err(unexpected(other)),
        }
    }

    /// Log records until the stream ends.
    pub fn logs(&self, npid: Npid, follow: bool, last_n: Option<usize>) -> Result<mpsc::UnboundedReceiver<LogRecord>, ClientError> {
        let mut rx = self.stream(CtlRequest::Logs { npid, follow, last_n })?;
        let (tx, out) = mpsc::unbounded_channel();
        tokio::spawn(async move {
            while let Some(CtlResponse::Log(rec)) = rx.recv().await {
                if tx.send(rec).is_err() {
                    return;
                }
            }
        });
        Ok(out)
    }

    pub async fn send(&self, dst: Dest, payload: impl Into<Vec<u8>>) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Send { dst, payload: payload.into() }).await
    }

    /// Next mailbox item: `Msg`, `Down`, or `Timeout`.
    pub async fn recv(&self, timeout: Duration) -> Result<CtlResponse, ClientError> {
        match self.request(CtlRequest::Recv { timeout_ms: timeout.as_millis() as u64 }).await? {
            r @ (CtlResponse::Msg(_) | CtlResponse::Down(_) | CtlResponse::Timeout) => Ok(r),
            other => Err(unexpected(other)),
        }
    }

    pub async fn register(&self, key: NameKey) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Register { key }).await
    }

    pub async fn unregister(&self, key: NameKey) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Unregister { key }).await
    }

    pub async fn wait(&self, key: NameKey, timeout: Duration) -> Result<Option<Npid>, ClientError> {
        match self.request(CtlRequest::Wait { key, timeout_ms: timeout.as_millis() as u64 }).await? {
            CtlResponse::Resolved { npid } => Ok(Some(npid)),
            CtlResponse::Timeout => Ok(None),
            other => Err(unexpected(other)),
        }
    }

    pub async fn subscribe(&self, topic: &str) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Subscribe { topic: topic.to_string() }).await
    }

    pub async fn unsubscribe(&self, topic: &str) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Unsubscribe { topic: topic.to_string() }).await
    }

    pub async fn publish(&self, topic: &str, payload: impl Into<Vec<u8>>) -> Result<(), ClientError> {
        self.expect_ok(CtlRequest::Publish { topic: topic.to_string(), payload: payload.into() }).await
    }

    pub async fn names(&self, tenant: Option<&str>) -> Result<Vec<NameTableEntry>, ClientError> {
        match self.request(CtlRequest::Names { tenant: tenant.map(str::to_string) }).await? {
            CtlResponse::NamesResult { entries } => Ok(entries),
            other => Err(unexpected(other)),
        }
    }

    pub async fn nodes(&self) -> Result<Vec<NodeView>, ClientError> {
        match self.request(CtlRequest::Nodes).await? {
            CtlResponse::NodesResult { nodes } => Ok(nodes),
            other => Err(unexpected(other)),
        }
    }

    pub async fn request_status(&self, request_id: Uuid) -> Result<RequestStatus, ClientError> {
        match self.request(CtlRequest::Request { request_id }).await? {
            CtlResponse::RequestState(st) => Ok(st),
            other => Err(unexpected(other)),
        }
    }

    /// (queued, dropped, delivered) for this session's mailbox.
    pub async fn mailbox_stats(&self) -> Result<(usize, u64, u64), ClientError> {
        match self.request(CtlRequest::Mailbox).await? {
            CtlResponse::MailboxStats { queued, dropped, delivered } => Ok((queued, dropped, delivered)),
            other => Err(unexpected(other)),
        }
    }
}
