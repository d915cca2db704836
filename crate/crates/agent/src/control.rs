//! Local control socket: SDK handshakes, CLI sessions, and the process and
//! messaging calls they make.

use std::sync::Arc;
use std::time::Duration;

use nefele_core::messaging::{Address, MailItem, NameKey};
use nefele_core::model::default_tenant;
use nefele_core::{Npid, SpawnKind, SpawnRequest};
use tokio::net::{UnixListener, UnixStream};
use tokio::sync::mpsc;
use tracing::{debug, warn};
use uuid::Uuid;

use crate::node::{lock, Node};
use crate::proto::{CtlRequest, CtlResponse, ErrorCode, NodeView, Req, RequestState, Resp};
use crate::router::Mailbox;
use crate::wire;

#[derive(Clone)]
struct Identity {
    npid: Npid,
    tenant: String,
    mailbox: Arc<Mailbox>,
    /// Attached clients own an ephemeral mailbox that dies with the session.
    ephemeral: bool,
}

struct Session {
    node: Arc<Node>,
    out: mpsc::UnboundedSender<Vec<u8>>,
    who: Option<Identity>,
}

impl Session {
    fn send(&self, re: Option<u64>, body: CtlResponse) {
        send_on(&self.out, re, body);
    }

    fn tenant(&self, explicit: Option<String>) -> String {
        explicit.or_else(|| self.who.as_ref().map(|w| w.tenant.clone())).unwrap_or_else(default_tenant)
    }

    fn identity(&self, re: Option<u64>) -> Option<Identity> {
        if self.who.is_none() {
            self.send(re, CtlResponse::error(ErrorCode::NotAttached, "session has no identity; send hello or attach first"));
        }
        self.who.clone()
    }
}

fn send_on(out: &mpsc::UnboundedSender<Vec<u8>>, re: Option<u64>, body: CtlResponse) {
    match wire::encode(&Resp { re, body }) {
        Ok(b) => {
            let _ = out.send(b);
        }
        Err(e) => warn!(error = %e, "unencodable response"),
    }
}

fn mail_response(item: Option<MailItem>) -> CtlResponse {
    match item {
        Some(MailItem::Msg(env)) => CtlResponse::Msg(env),
        Some(MailItem::Down(d)) => CtlResponse::Down(d),
        None => CtlResponse::Timeout,
    }
}

impl Node {
    pub async fn serve_control(self: Arc<Self>, listener: UnixListener) {
        let mut shutdown = self.shutdown.subscribe();
        loop {
            tokio::select! {
                r = listener.accept() => match r {
                    Ok((stream, _)) => {
                        tokio::spawn(self.clone().control_session(stream));
                    }
                    Err(e) => warn!(error = %e, "control accept"),
                },
                _ = shutdown.changed() => return,
            }
        }
    }

    async fn control_session(self: Arc<Self>, stream: UnixStream) {
        let (mut r, mut w) = stream.into_split();
        let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
        tokio::spawn(async move {
            use tokio::io::AsyncWriteExt;
            while let Some(first) = rx.recv().await {
                if w.write_all(&first).await.is_err() {
                    return;
                }
                while let Ok(more) = rx.try_recv() {
                    if w.write_all(&more).await.is_err() {
                        return;
                    }
                }
            }
            let _ = w.shutdown().await;
        });
        let mut s = Session { node: self.clone(), out: tx, who: None };
        loop {
            let body = match wire::read_body(&mut r).await {
                Ok(Some(b)) => b,
                Ok(None) => break,
                Err(e) => {
                    s.send(None, CtlResponse::error(ErrorCode::BadRequest, e.to_string()));
                    break;
                }
            };
            let req: Req<CtlRequest> = match nefele_core::frame::decode_body(&body) {
                Ok(r) => r,
                Err(e) => {
                    let re = serde_json::from_slice::<serde_json::Value>(&body)
                        .ok()
                        .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
                    s.send(re, CtlResponse::error(ErrorCode::BadRequest, e.to_string()));
                    continue;
                }
            };
            if !s.handle(req).await {
                break;
            }
        }
        if let Some(who) = s.who.take() {
            if who.ephemeral {
                self.remove_mailbox(who.npid);
            }
        }
    }
}

impl Session {
    /// Handles one request. Returns false when the session must close.
    async fn handle(&mut self, req: Req<CtlRequest>) -> bool {
        let re = req.id;
        let node = self.node.clone();
        match req.body {
            CtlRequest::Hello { token, os_pid } => {
                if self.who.is_some() {
                    self.send(re, CtlResponse::error(ErrorCode::AlreadyAttached, "session already has an identity"));
                    return true;
                }
                match node.handshake(&token, os_pid) {
                    Ok((npid, tenant)) => {
                        let mailbox = lock(&node.router).add_mailbox(npid, &tenant);
                        self.who = Some(Identity { npid, tenant: tenant.clone(), mailbox, ephemeral: false });
                        self.send(re, CtlResponse::Ack { npid, tenant });
                    }
                    Err(code) => {
                        let msg = match code {
                            ErrorCode::Gone => "process already exited",
                            _ => "unknown or already used token",
                        };
                        self.send(re, CtlResponse::error(code, msg));
                        return false;
                    }
                }
            }
            CtlRequest::Attach { tenant } => {
                if self.who.is_some() {
                    self.send(re, CtlResponse::error(ErrorCode::AlreadyAttached, "session already has an identity"));
                    return true;
                }
                let tenant = tenant.unwrap_or_else(default_tenant);
                let npid = node.alloc_npid();
                let mailbox = lock(&node.router).add_mailbox(npid, &tenant);
                self.who = Some(Identity { npid, tenant: tenant.clone(), mailbox, ephemeral: true });
                self.send(re, CtlResponse::Ack { npid, tenant });
            }
            CtlRequest::Spawn { tenant, request_id, task } => {
                self.spawn(re, tenant, request_id, SpawnKind::Spawn, vec![task]);
            }
            CtlRequest::Nspawn { tenant, request_id, task, count } => {
                self.spawn(re, tenant, request_id, SpawnKind::Nspawn, vec![task; count]);
            }
            CtlRequest::Cspawn { tenant, request_id, tasks } => {
                self.spawn(re, tenant, request_id, SpawnKind::Cspawn, tasks);
            }
            CtlRequest::Kill { npid, signal } => {
                let out = self.out.clone();
                tokio::spawn(async move {
                    let body = match node.signal(npid, signal).await {
                        Ok(()) => CtlResponse::Ok,
                        Err(code) => CtlResponse::error(code, format!("signal {signal} to {npid}")),
                    };
                    send_on(&out, re, body);
                });
            }
            CtlRequest::Monitor { target } => {
                let Some(who) = self.identity(re) else { return true };
                node.monitor(who.npid, target).await;
                self.send(re, CtlResponse::Ok);
            }
            CtlRequest::Ps { scope, tenant } => {
                let out = self.out.clone();
                tokio::spawn(async move {
                    let l = node.ps(scope, tenant).await;
                    send_on(
                        &out,
                        re,
                        CtlResponse::PsResult { processes: l.processes, partial: l.partial, unreachable: l.unreachable },
                    );
                });
            }
            CtlRequest::Logs { npid, follow, last_n } => {
                let out = self.out.clone();
                tokio::spawn(async move {
                    let mut rx = node.logs(npid, follow, last_n).await;
                    while let Some(rec) = rx.recv().await {
                        if out.is_closed() {
                            return;
                        }
                        send_on(&out, re, CtlResponse::Log(rec));
                    }
                    send_on(&out, re, CtlResponse::LogEnd);
                });
            }
            CtlRequest::Send { dst, payload } => {
                let Some(who) = self.identity(re) else { return true };
                let addr = node.dest_to_address(&who.tenant, dst);
                let body = match node.send(who.npid, &who.tenant, addr, payload).await {
                    Ok(()) => CtlResponse::Ok,
                    Err(e) => CtlResponse::error(e.code(), e.to_string()),
                };
                self.send(re, body);
            }
            CtlRequest::Recv { timeout_ms } => {
                let Some(who) = self.identity(re) else { return true };
                let out = self.out.clone();
                tokio::spawn(async move {
                    let item = who.mailbox.recv(Duration::from_millis(timeout_ms)).await;
                    send_on(&out, re, mail_response(item));
                });
            }
            CtlRequest::Register { key } => {
                let Some(who) = self.identity(re) else { return true };
                let body = match node.register(who.npid, &who.tenant, key) {
                    Ok(()) => CtlResponse::Ok,
                    Err(e) => CtlResponse::error(e.code(), e.to_string()),
                };
                self.send(re, body);
            }
            CtlRequest::Unregister { key } => {
                let Some(who) = self.identity(re) else { return true };
                node.unregister(who.npid, &who.tenant, &key);
                self.send(re, CtlResponse::Ok);
            }
            CtlRequest::Wait { key, timeout_ms } => {
                if let Err(e) = key.validate() {
                    self.send(re, CtlResponse::error(ErrorCode::BadRequest, e.to_string()));
                    return true;
                }
                let tenant = self.tenant(None);
                let out = self.out.clone();
                tokio::spawn(async move {
                    let body = match node.wait_for(&tenant, &key, Duration::from_millis(timeout_ms)).await {
                        Some(npid) => CtlResponse::Resolved { npid },
                        None => CtlResponse::Timeout,
                    };
                    send_on(&out, re, body);
                });
            }
            CtlRequest::Subscribe { topic } => {
                let Some(who) = self.identity(re) else { return true };
                match NameKey::Topic(topic.clone()).validate() {
                    Ok(()) => {
                        node.subscribe(who.npid, &who.tenant, &topic);
                        self.send(re, CtlResponse::Ok);
                    }
                    Err(e) => self.send(re, CtlResponse::error(ErrorCode::BadRequest, e.to_string())),
                }
            }
            CtlRequest::Unsubscribe { topic } => {
                let Some(who) = self.identity(re) else { return true };
                node.unsubscribe(who.npid, &who.tenant, &topic);
                self.send(re, CtlResponse::Ok);
            }
            CtlRequest::Publish { topic, payload } => {
                let Some(who) = self.identity(re) else { return true };
                let addr = Address::Topic { tenant: who.tenant.clone(), topic };
                let body = match node.send(who.npid, &who.tenant, addr, payload).await {
                    Ok(()) => CtlResponse::Ok,
                    Err(e) => CtlResponse::error(e.code(), e.to_string()),
                };
                self.send(re, body);
            }
            CtlRequest::Names { tenant } => {
                self.send(re, CtlResponse::NamesResult { entries: node.names(tenant.as_deref()) });
            }
            CtlRequest::Nodes => {
                self.send(re, CtlResponse::NodesResult { nodes: node.nodes() });
            }
            CtlRequest::Request { request_id } => match node.request_status(&request_id) {
                Some(st) => self.send(re, CtlResponse::RequestState(st)),
                None => self.send(re, CtlResponse::error(ErrorCode::UnknownRequest, format!("no request {request_id}"))),
            },
            CtlRequest::Mailbox => {
                let Some(who) = self.identity(re) else { return true };
                let (queued, dropped, delivered) = who.mailbox.stats();
                self.send(re, CtlResponse::MailboxStats { queued, dropped, delivered });
            }
        }
        true
    }

    fn spawn(&self, re: Option<u64>, tenant: Option<String>, request_id: Option<Uuid>, kind: SpawnKind, tasks: Vec<nefele_core::TaskSpec>) {
        let mut req = SpawnRequest::new(self.tenant(tenant), kind, tasks);
        if let Some(id) = request_id {
            req.request_id = id;
        }
        let node = self.node.clone();
        let out = self.out.clone();
        let id = req.request_id;
        match node.submit(req) {
            Ok(st) if st.state != RequestState::Pending => send_on(&out, re, CtlResponse::SpawnResult(st)),
            Ok(_) => {
                tokio::spawn(async move {
                    match node.wait_request(&id).await {
                        Some(st) => send_on(&out, re, CtlResponse::SpawnResult(st)),
                        None => send_on(&out, re, CtlResponse::error(ErrorCode::Internal, "request vanished")),
                    }
                });
            }
            Err(r) => {
                debug!(reason = %r, "spawn refused");
                send_on(&out, re, CtlResponse::error(ErrorCode::BadRequest, r.to_string()));
            }
        }
    }
}

impl Node {
    pub fn names(&self, tenant: Option<&str>) -> Vec<nefele_core::messaging::NameTableEntry> {
        let mut entries = lock(&self.router).names.entries();
        if let Some(t) = tenant {
            entries.retain(|e| e.tenant == t);
        }
        entries
    }

    /// Membership view; resource figures are known for this node only.
    pub fn nodes(&self) -> Vec<NodeView> {
        let members = lock(&self.swim).members();
        let (cap, alloc, res) = {
            let l = lock(&self.ledger);
            (l.capacity(), l.allocated(), l.reserved())
        };
        members
            .into_iter()
            .map(|m| {
                let mine = m.node.id == self.me.id;
                NodeView {
                    node: m.node,
                    status: m.status,
                    gossip_addr: m.addr,
                    peer_addr: m.tags.get("peer").cloned(),
                    http_addr: m.tags.get("http").cloned(),
                    capacity: mine.then_some(cap),
                    allocated: mine.then_some(alloc),
                    reserved: mine.then_some(res),
                }
            })
            .collect()
    }
}
