//! Persistent TCP links between agents. One outbound connection per peer
//! carries every frame this node originates towards it, so frames to a
//! given node leave in submission order; replies come back on the same link.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use nefele_core::NodeId;
use thiserror::Error;
use tokio::io::{AsyncWriteExt, BufWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tracing::{debug, warn};

use crate::node::{lock, Node};
use crate::proto::{PeerFrame, PeerMsg};
use crate::wire;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeerError {
    #[error("node {0} is not a live member")]
    NotMember(u32),
    #[error("connecting to node {0}: {1}")]
    Connect(u32, String),
    #[error("link to node {0} closed")]
    Closed(u32),
    #[error("node {0} did not answer in time")]
    Timeout(u32),
}

impl PeerError {
    pub fn node(&self) -> u32 {
        match self {
            PeerError::NotMember(n) | PeerError::Connect(n, _) | PeerError::Closed(n) | PeerError::Timeout(n) => *n,
        }
    }
}

pub struct PeerConn {
    pub node: NodeId,
    tx: mpsc::UnboundedSender<Vec<u8>>,
    pending: Mutex<HashMap<u64, mpsc::UnboundedSender<PeerMsg>>>,
    closed: AtomicBool,
}

impl PeerConn {
    fn new(node: NodeId, tx: mpsc::UnboundedSender<Vec<u8>>) -> Arc<Self> {
        Arc::new(Self { node, tx, pending: Mutex::new(HashMap::new()), closed: AtomicBool::new(false) })
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire) || self.tx.is_closed()
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
        lock(&self.pending).clear();
    }

    pub fn write(&self, frame: &PeerFrame) -> bool {
        match wire::encode(frame) {
            Ok(bytes) => self.tx.send(bytes).is_ok(),
            Err(e) => {
                warn!(error = %e, "dropping unencodable peer frame");
                false
            }
        }
    }

    /// Sends a reply to request `id` (no-op for one-way frames).
    pub fn reply(&self, id: Option<u64>, body: PeerMsg) {
        if let Some(re) = id {
            self.write(&PeerFrame { id: None, re: Some(re), body });
        }
    }
}

pub struct Peers {
    conns: tokio::sync::Mutex<HashMap<u32, Arc<PeerConn>>>,
    next_id: AtomicU64,
    delay: Duration,
}

impl Peers {
    pub fn new(delay: Duration) -> Self {
        Self { conns: tokio::sync::Mutex::new(HashMap::new()), next_id: AtomicU64::new(1), delay }
    }

    /// Drops the outbound link to `id`, failing its outstanding requests.
    pub async fn disconnect(&self, id: u32) {
        if let Some(c) = self.conns.lock().await.remove(&id) {
            c.close();
        }
    }
}

/// Replies still expected on a stream: everything but `log` frames ends it.
fn is_final(msg: &PeerMsg) -> bool {
    !matches!(msg, PeerMsg::Log { .. })
}

impl Node {
    async fn conn(self: &Arc<Self>, id: u32) -> Result<Arc<PeerConn>, PeerError> {
        let member = self.member(id).filter(|m| m.status != nefele_core::membership::Status::Dead);
        let member = member.ok_or(PeerError::NotMember(id))?;
        let mut conns = self.peers.conns.lock().await;
        if let Some(c) = conns.get(&id) {
            if !c.is_closed() && c.node == member.node {
                return Ok(c.clone());
            }
            conns.remove(&id);
        }
        let addr = member.tags.get("peer").cloned().ok_or(PeerError::NotMember(id))?;
        let stream = tokio::time::timeout(Duration::from_secs(2), TcpStream::connect(&addr))
            .await
            .map_err(|_| PeerError::Connect(id, "timed out".into()))?
            .map_err(|e| PeerError::Connect(id, e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let (tx, rx) = mpsc::unbounded_channel();
        let conn = PeerConn::new(member.node, tx);
        conn.write(&PeerFrame { id: None, re: None, body: PeerMsg::Hello { node: self.me } });
        let (r, w) = stream.into_split();
        tokio::spawn(write_loop(w, rx));
        tokio::spawn(self.clone().read_loop(r, conn.clone()));
        conns.insert(id, conn.clone());
        Ok(conn)
    }

    /// Fire-and-forget send.
    pub async fn peer_send(self: &Arc<Self>, to: u32, body: PeerMsg) -> Result<(), PeerError> {
        let conn = self.conn(to).await?;
        if conn.write(&PeerFrame { id: None, re: None, body }) {
            Ok(())
        } else {
            Err(PeerError::Closed(to))
        }
    }

    /// Sends a request and returns the channel its replies arrive on.
    pub async fn peer_stream(self: &Arc<Self>, to: u32, body: PeerMsg) -> Result<mpsc::UnboundedReceiver<PeerMsg>, PeerError> {
        let conn = self.conn(to).await?;
        let id = self.peers.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::unbounded_channel();
        lock(&conn.pending).insert(id, tx);
        if conn.is_closed() || !conn.write(&PeerFrame { id: Some(id), re: None, body }) {
            lock(&conn.pending).remove(&id);
            return Err(PeerError::Closed(to));
        }
        Ok(rx)
    }

    pub async fn peer_request(self: &Arc<Self>, to: u32, body: PeerMsg, timeout: Duration) -> Result<PeerMsg, PeerError> {
        let deadline = tokio::time::Instant::now() + timeout;
        let mut rx = tokio::time::timeout_at(deadline, self.peer_stream(to, body))
            .await
            .map_err(|_| PeerError::Timeout(to))??;
        match tokio::time::timeout_at(deadline, rx.recv()).await {
            Ok(Some(m)) => Ok(m),
            Ok(None) => Err(PeerError::Closed(to)),
            Err(_) => Err(PeerError::Timeout(to)),
        }
    }

    /// Sends `body` to every live peer, best effort.
    pub fn broadcast(self: &Arc<Self>, body: PeerMsg) {
        for peer in self.alive_peers() {
            let node = self.clone();
            let body = body.clone();
            tokio::spawn(async move {
                if let Err(e) = node.peer_send(peer.id, body).await {
                    debug!(error = %e, "broadcast");
                }
            });
        }
    }

    pub async fn accept_peers(self: Arc<Self>, listener: TcpListener) {
        let mut shutdown = self.shutdown.subscribe();
        loop {
            tokio::select! {
                r = listener.accept() => match r {
                    Ok((stream, _)) => {
                        let _ = stream.set_nodelay(true);
                        tokio::spawn(self.clone().serve_inbound(stream));
                    }
                    Err(e) => warn!(error = %e, "peer accept"),
                },
                _ = shutdown.changed() => return,
            }
        }
    }

    async fn serve_inbound(self: Arc<Self>, stream: TcpStream) {
        let (mut r, w) = stream.into_split();
        let hello: Option<PeerFrame> = match wire::read_frame(&mut r).await {
            Ok(f) => f,
            Err(e) => {
                debug!(error = %e, "bad peer hello");
                return;
            }
        };
        let Some(PeerFrame { body: PeerMsg::Hello { node }, .. }) = hello else { return };
        let (tx, rx) = mpsc::unbounded_channel();
        let conn = PeerConn::new(node, tx);
        tokio::spawn(write_loop(w, rx));
        self.read_loop(r, conn).await;
    }

    async fn read_loop(self: Arc<Self>, mut r: tokio::net::tcp::OwnedReadHalf, conn: Arc<PeerConn>) {
        let delay = self.peers.delay;
        let delayed = if delay.is_zero() {
            None
        } else {
            let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, PeerFrame)>();
            let node = self.clone();
            let c = conn.clone();
            tokio::spawn(async move {
                while let Some((at, f)) = rx.recv().await {
                    tokio::time::sleep_until((at + delay).into()).await;
                    node.dispatch(&c, f);
                }
            });
            Some(tx)
        };
        loop {
            match wire::read_frame::<_, PeerFrame>(&mut r).await {
                Ok(Some(f)) => match &delayed {
                    Some(tx) => {
                        let _ = tx.send((Instant::now(), f));
                    }
                    None => self.dispatch(&conn, f),
                },
                Ok(None) => break,
                Err(e) => {
                    debug!(node = %conn.node, error = %e, "peer link read");
                    break;
                }
            }
        }
        conn.close();
    }

    fn dispatch(self: &Arc<Self>, conn: &Arc<PeerConn>, f: PeerFrame) {
        if let Some(re) = f.re {
            let mut pending = lock(&conn.pending);
            if let Some(tx) = pending.get(&re) {
                let fin = is_final(&f.body);
                let _ = tx.send(f.body);
                if fin {
                    pending.remove(&re);
                }
            }
            return;
        }
        self.handle_peer(conn.clone(), f.id, f.body);
    }
}

async fn write_loop(w: tokio::net::tcp::OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<Vec<u8>>) {
    let mut w = BufWriter::new(w);
    while let Some(first) = rx.recv().await {
        if w.write_all(&first).await.is_err() {
            return;
        }
        while let Ok(more) = rx.try_recv() {
            if w.write_all(&more).await.is_err() {
                return;
            }
        }
        if w.flush().await.is_err() {
            return;
        }
    }
    let _ = w.shutdown().await;
}
