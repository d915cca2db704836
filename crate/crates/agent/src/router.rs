//! Mailboxes, name registry, pub/sub, and message routing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use nefele_core::messaging::{
    Address, DownNotice, DownReason, Envelope, GroupMode, MailItem, MailQueue, NameKey, NameReplica,
};
use nefele_core::{NodeId, Npid};
use thiserror::Error;
use tokio::sync::Notify;
use tracing::debug;

use crate::node::{lock, unix_us, Node, Reach};
use crate::proto::{Dest, ErrorCode, PeerMsg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SendError {
    #[error("no such process {0}")]
    NoSuchProcess(Npid),
    #[error("no registrant for {0}")]
    NoRoute(String),
    #[error("node {0} is unreachable")]
    Unreachable(NodeId),
    #[error("payload of {0} bytes exceeds the 1 MiB limit")]
    PayloadTooLarge(usize),
    #[error("{0}")]
    Invalid(String),
}

impl SendError {
    pub fn code(&self) -> ErrorCode {
        match self {
            SendError::NoSuchProcess(_) => ErrorCode::NoSuchProcess,
            SendError::NoRoute(_) => ErrorCode::NoRoute,
            SendError::Unreachable(_) => ErrorCode::Unreachable,
            SendError::PayloadTooLarge(_) => ErrorCode::PayloadTooLarge,
            SendError::Invalid(_) => ErrorCode::BadRequest,
        }
    }
}

/// One process's (or attached client's) queue. Many producers, one consumer.
pub struct Mailbox {
    pub npid: Npid,
    pub tenant: String,
    queue: Mutex<MailQueue>,
    notify: Notify,
    closed: AtomicBool,
}

impl Mailbox {
    fn new(npid: Npid, tenant: String) -> Arc<Self> {
        Arc::new(Self { npid, tenant, queue: Mutex::new(MailQueue::default()), notify: Notify::new(), closed: AtomicBool::new(false) })
    }

    pub fn push(&self, item: MailItem) {
        if self.closed.load(Ordering::Acquire) {
            return;
        }
        lock(&self.queue).push(item);
        self.notify.notify_one();
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
        self.notify.notify_waiters();
    }

    /// Oldest queued item, waiting up to `timeout`.
    pub async fn recv(&self, timeout: Duration) -> Option<MailItem> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if let Some(item) = lock(&self.queue).pop() {
                return Some(item);
            }
            if self.closed.load(Ordering::Acquire) {
                return None;
            }
            if tokio::time::timeout_at(deadline, self.notify.notified()).await.is_err() {
                return lock(&self.queue).pop();
            }
        }
    }

    /// (queued, dropped, delivered)
    pub fn stats(&self) -> (usize, u64, u64) {
        let q = lock(&self.queue);
        (q.len(), q.dropped(), q.delivered())
    }
}

pub type TopicKey = (String, String);

pub struct Router {
    pub names: NameReplica,
    mailboxes: HashMap<Npid, Arc<Mailbox>>,
    subs: BTreeMap<TopicKey, BTreeSet<Npid>>,
    remote_interest: HashMap<u32, HashSet<TopicKey>>,
    seqs: HashMap<(Npid, Npid), u64>,
    topic_seqs: HashMap<(Npid, TopicKey), u64>,
    /// Remote target -> local watchers still owed a DOWN.
    remote_watches: HashMap<Npid, BTreeSet<Npid>>,
}

impl Router {
    pub fn new(me: NodeId) -> Self {
        Self {
            names: NameReplica::new(me),
            mailboxes: HashMap::new(),
            subs: BTreeMap::new(),
            remote_interest: HashMap::new(),
            seqs: HashMap::new(),
            topic_seqs: HashMap::new(),
            remote_watches: HashMap::new(),
        }
    }

    pub fn add_mailbox(&mut self, npid: Npid, tenant: &str) -> Arc<Mailbox> {
        self.mailboxes.entry(npid).or_insert_with(|| Mailbox::new(npid, tenant.to_string())).clone()
    }

    pub fn mailbox(&self, npid: &Npid) -> Option<Arc<Mailbox>> {
        self.mailboxes.get(npid).cloned()
    }

    pub fn topics(&self) -> Vec<TopicKey> {
        self.subs.keys().cloned().collect()
    }

    fn next_seq(&mut self, src: Npid, dst: Npid) -> u64 {
        let s = self.seqs.entry((src, dst)).or_insert(0);
        *s += 1;
        *s
    }
}

/// What a process's removal changed, so the caller can tell peers.
#[derive(Debug, Default)]
pub struct Removal {
    pub names_changed: bool,
    pub topics_dropped: Vec<TopicKey>,
}

impl Node {
    pub fn dest_to_address(&self, tenant: &str, dst: Dest) -> Address {
        let tenant = tenant.to_string();
        match dst {
            Dest::Npid { npid } => Address::Npid { npid },
            Dest::Name { name } => Address::Name { tenant, name },
            Dest::Service { id } => Address::Service { tenant, id },
            Dest::Topic { topic } => Address::Topic { tenant, topic },
            Dest::Group { name, mode } => Address::Group { tenant, name, mode },
        }
    }

    /// Routes one message from `src`. Returns once handed to the owner
    /// node's transport; delivery is at-most-once.
    pub async fn send(self: &Arc<Self>, src: Npid, tenant: &str, dst: Address, payload: Vec<u8>) -> Result<(), SendError> {
        Envelope::check_payload(&payload).map_err(|_| SendError::PayloadTooLarge(payload.len()))?;
        dst.validate().map_err(|e| SendError::Invalid(e.to_string()))?;
        match &dst {
            Address::Npid { npid } => self.send_to(src, *npid, dst.clone(), payload).await,
            Address::Topic { tenant: t, topic } => {
                self.publish(src, t, topic, payload);
                Ok(())
            }
            Address::Group { mode: GroupMode::All, .. } => {
                let (t, key) = dst.key().expect("named address");
                let regs = lock(&self.router).names.resolve(t, &key);
                if regs.is_empty() {
                    return Err(SendError::NoRoute(key.to_string()));
                }
                for (npid, _) in regs {
                    if let Err(e) = self.send_to(src, npid, dst.clone(), payload.clone()).await {
                        debug!(error = %e, "group member send");
                    }
                }
                Ok(())
            }
            _ => {
                let (t, key) = dst.key().expect("named address");
                debug_assert_eq!(t, tenant);
                let first = lock(&self.router).names.resolve(t, &key).first().map(|(n, _)| *n);
                let target = first.ok_or_else(|| SendError::NoRoute(key.to_string()))?;
                self.send_to(src, target, dst.clone(), payload).await
            }
        }
    }

    async fn send_to(self: &Arc<Self>, src: Npid, to: Npid, dst: Address, payload: Vec<u8>) -> Result<(), SendError> {
        match self.reachability(to.node) {
            Reach::Local => {
                let mut r = lock(&self.router);
                let mb = r.mailbox(&to).ok_or(SendError::NoSuchProcess(to))?;
                let msg_seq = r.next_seq(src, to);
                drop(r);
                mb.push(MailItem::Msg(Envelope { src, dst, payload, msg_seq }));
                Ok(())
            }
            Reach::Remote(node) => {
                let msg_seq = lock(&self.router).next_seq(src, to);
                let env = Envelope { src, dst, payload, msg_seq };
                self.peer_send(node.id, PeerMsg::Msg { to, env }).await.map_err(|_| SendError::Unreachable(node))
            }
            Reach::Dead => Err(SendError::Unreachable(to.node)),
            Reach::Stale | Reach::Unknown => Err(SendError::NoSuchProcess(to)),
        }
    }

    /// Delivers a message that arrived from another node.
    pub fn deliver_remote(&self, to: Npid, env: Envelope) {
        let mb = lock(&self.router).mailbox(&to);
        match mb {
            Some(mb) if tenant_allows(&mb.tenant, &env.dst) => mb.push(MailItem::Msg(env)),
            _ => debug!(%to, "dropping message for unknown mailbox"),
        }
    }

    pub fn publish(self: &Arc<Self>, src: Npid, tenant: &str, topic: &str, payload: Vec<u8>) {
        let key = (tenant.to_string(), topic.to_string());
        let (env, local, remote) = {
            let mut r = lock(&self.router);
            let s = r.topic_seqs.entry((src, key.clone())).or_insert(0);
            *s += 1;
            let env = Envelope {
                src,
                dst: Address::Topic { tenant: key.0.clone(), topic: key.1.clone() },
                payload,
                msg_seq: *s,
            };
            let local: Vec<Arc<Mailbox>> =
                r.subs.get(&key).into_iter().flatten().filter_map(|n| r.mailboxes.get(n).cloned()).collect();
            let remote: Vec<u32> =
                r.remote_interest.iter().filter(|(_, ts)| ts.contains(&key)).map(|(id, _)| *id).collect();
            (env, local, remote)
        };
        for mb in local {
            mb.push(MailItem::Msg(env.clone()));
        }
        let alive: HashSet<u32> = self.alive_peers().into_iter().map(|n| n.id).collect();
        for id in remote.into_iter().filter(|id| alive.contains(id)) {
            let node = self.clone();
            let msg = PeerMsg::Pub { tenant: key.0.clone(), topic: key.1.clone(), env: env.clone() };
            tokio::spawn(async move {
                let _ = node.peer_send(id, msg).await;
            });
        }
    }

    pub fn deliver_pub(&self, tenant: String, topic: String, env: Envelope) {
        let r = lock(&self.router);
        for n in r.subs.get(&(tenant, topic)).into_iter().flatten() {
            if let Some(mb) = r.mailboxes.get(n) {
                mb.push(MailItem::Msg(env.clone()));
            }
        }
    }

    pub fn subscribe(self: &Arc<Self>, npid: Npid, tenant: &str, topic: &str) {
        let key = (tenant.to_string(), topic.to_string());
        let new_topic = {
            let mut r = lock(&self.router);
            let set = r.subs.entry(key).or_default();
            let fresh = set.is_empty();
            set.insert(npid);
            fresh
        };
        if new_topic {
            self.announce_interest();
        }
    }

    pub fn unsubscribe(self: &Arc<Self>, npid: Npid, tenant: &str, topic: &str) {
        let key = (tenant.to_string(), topic.to_string());
        let emptied = {
            let mut r = lock(&self.router);
            match r.subs.get_mut(&key) {
                Some(set) => {
                    set.remove(&npid);
                    let empty = set.is_empty();
                    if empty {
                        r.subs.remove(&key);
                    }
                    empty
                }
                None => false,
            }
        };
        if emptied {
            self.broadcast(PeerMsg::Unsub { tenant: key.0, topic: key.1 });
        }
    }

    pub fn announce_interest(self: &Arc<Self>) {
        let topics = lock(&self.router).topics();
        self.broadcast(PeerMsg::Sub { topics });
    }

    pub fn set_remote_interest(&self, node: u32, topics: Vec<TopicKey>) {
        lock(&self.router).remote_interest.insert(node, topics.into_iter().collect());
    }

    pub fn drop_remote_interest(&self, node: u32, key: &TopicKey) {
        if let Some(set) = lock(&self.router).remote_interest.get_mut(&node) {
            set.remove(key);
        }
    }

    /// Registers `key` for a live local mailbox.
    pub fn register(self: &Arc<Self>, npid: Npid, tenant: &str, key: NameKey) -> Result<(), SendError> {
        key.validate().map_err(|e| SendError::Invalid(e.to_string()))?;
        let changed = {
            let mut r = lock(&self.router);
            if !r.mailboxes.contains_key(&npid) {
                return Err(SendError::NoSuchProcess(npid));
            }
            r.names.register(tenant, key, npid, unix_us())
        };
        if changed {
            self.names_changed();
        }
        Ok(())
    }

    pub fn unregister(self: &Arc<Self>, npid: Npid, tenant: &str, key: &NameKey) {
        if lock(&self.router).names.unregister(tenant, key, npid) {
            self.names_changed();
        }
    }

    fn names_changed(self: &Arc<Self>) {
        self.bump_names();
        let table = lock(&self.router).names.snapshot();
        self.broadcast(PeerMsg::NameUpdate { table });
    }

    pub fn resolve(&self, tenant: &str, key: &NameKey) -> Vec<(Npid, u64)> {
        lock(&self.router).names.resolve(tenant, key)
    }

    /// Waits until `key` has a registrant; returns the preferred one.
    pub async fn wait_for(&self, tenant: &str, key: &NameKey, timeout: Duration) -> Option<Npid> {
        let mut rx = self.names_version.subscribe();
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            rx.borrow_and_update();
            if let Some((n, _)) = self.resolve(tenant, key).first() {
                return Some(*n);
            }
            match tokio::time::timeout_at(deadline, rx.changed()).await {
                Ok(Ok(())) => continue,
                _ => return None,
            }
        }
    }

    /// Removes a local mailbox with its names and subscriptions.
    pub fn remove_mailbox(self: &Arc<Self>, npid: Npid) {
        let removal = {
            let mut r = lock(&self.router);
            if let Some(mb) = r.mailboxes.remove(&npid) {
                mb.close();
            }
            let names_changed = r.names.revoke(npid);
            let mut dropped = Vec::new();
            r.subs.retain(|k, set| {
                set.remove(&npid);
                if set.is_empty() {
                    dropped.push(k.clone());
                    false
                } else {
                    true
                }
            });
            r.seqs.retain(|(s, d), _| *s != npid && *d != npid);
            r.topic_seqs.retain(|(s, _), _| *s != npid);
            Removal { names_changed, topics_dropped: dropped }
        };
        if removal.names_changed {
            self.names_changed();
        }
        for (tenant, topic) in removal.topics_dropped {
            self.broadcast(PeerMsg::Unsub { tenant, topic });
        }
    }

    /// Routes a DOWN to its watcher, local or remote.
    pub fn deliver_down(self: &Arc<Self>, watcher: Npid, notice: DownNotice) {
        if self.is_local(&watcher) {
            if let Some(mb) = lock(&self.router).mailbox(&watcher) {
                mb.push(MailItem::Down(notice));
            }
            return;
        }
        let node = self.clone();
        tokio::spawn(async move {
            let _ = node.peer_send(watcher.node.id, PeerMsg::Down { watcher, notice }).await;
        });
    }

    /// A DOWN from the target's owner; delivered once per registration.
    pub fn receive_down(&self, watcher: Npid, notice: DownNotice) {
        let owed = {
            let mut r = lock(&self.router);
            let owed = match r.remote_watches.get_mut(&notice.npid) {
                Some(set) => {
                    let had = set.remove(&watcher);
                    if set.is_empty() {
                        r.remote_watches.remove(&notice.npid);
                    }
                    had
                }
                None => false,
            };
            owed.then(|| r.mailbox(&watcher)).flatten()
        };
        if let Some(mb) = owed {
            mb.push(MailItem::Down(notice));
        }
    }

    pub fn note_remote_watch(&self, watcher: Npid, target: Npid) -> bool {
        lock(&self.router).remote_watches.entry(target).or_default().insert(watcher)
    }

    /// Membership declared `dead` Dead: forget its names and interest, and
    /// owe every local watcher of its processes a DOWN(nodedown).
    pub fn purge_node(self: &Arc<Self>, dead: NodeId) {
        let owed: Vec<(Npid, Npid)> = {
            let mut r = lock(&self.router);
            r.names.drop_origin(dead);
            r.remote_interest.remove(&dead.id);
            let targets: Vec<Npid> = r
                .remote_watches
                .keys()
                .filter(|t| t.node.id == dead.id && t.node.incarnation <= dead.incarnation)
                .copied()
                .collect();
            let mut owed = Vec::new();
            for t in targets {
                for w in r.remote_watches.remove(&t).unwrap_or_default() {
                    owed.push((w, t));
                }
            }
            owed
        };
        self.bump_names();
        for (w, t) in owed {
            let mut notice = DownNotice::without_process(t, DownReason::Nodedown);
            notice.node = t.node;
            self.deliver_down(w, notice);
        }
    }
}

fn tenant_allows(mailbox_tenant: &str, dst: &Address) -> bool {
    match dst.key() {
        Some((t, _)) => t == mailbox_tenant,
        None => true,
    }
}
