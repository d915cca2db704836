use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::model::NodeId;

/// Time since an arbitrary epoch chosen by the driver (real or simulated clock).
pub type Timestamp = Duration;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwimConfig {
    pub protocol_period: Duration,
    pub indirect_probes: usize,
    pub suspect_timeout: Duration,
    pub piggyback_limit: usize,
}

impl Default for SwimConfig {
    fn default() -> Self {
        Self {
            protocol_period: Duration::from_millis(200),
            indirect_probes: 3,
            suspect_timeout: Duration::from_millis(600),
            piggyback_limit: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SwimConfigError {
    #[error("protocol period must be positive")]
    ZeroPeriod,
    #[error("at least one indirect probe is required")]
    NoIndirectProbes,
    #[error("suspect timeout must be at least one protocol period")]
    SuspectTooShort,
}

impl SwimConfig {
    pub fn validate(&self) -> Result<(), SwimConfigError> {
        if self.protocol_period.is_zero() {
            return Err(SwimConfigError::ZeroPeriod);
        }
        if self.indirect_probes == 0 {
            return Err(SwimConfigError::NoIndirectProbes);
        }
        if self.suspect_timeout < self.protocol_period {
            return Err(SwimConfigError::SuspectTooShort);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Alive,
    Suspect,
    Dead,
}

impl Status {
    fn precedence(self) -> u8 {
        match self {
            Status::Alive => 0,
            Status::Suspect => 1,
            Status::Dead => 2,
        }
    }
}

/// A membership assertion about one node, as carried in gossip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Update {
    pub node: u32,
    pub node_inc: u32,
    pub addr: String,
    pub status: Status,
    pub status_inc: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl Update {
    pub fn node_id(&self) -> NodeId {
        NodeId::new(self.node, self.node_inc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t")]
pub enum GossipMsg {
    #[serde(rename = "ping")]
    Ping { from: Update, seq: u64, updates: Vec<Update> },
    #[serde(rename = "ack")]
    Ack { from: Update, seq: u64, updates: Vec<Update> },
    #[serde(rename = "ping-req")]
    PingReq { from: Update, seq: u64, target: u32, target_addr: String, updates: Vec<Update> },
}

impl GossipMsg {
    pub fn from(&self) -> &Update {
        match self {
            GossipMsg::Ping { from, .. } | GossipMsg::Ack { from, .. } | GossipMsg::PingReq { from, .. } => from,
        }
    }

    pub fn updates(&self) -> &[Update] {
        match self {
            GossipMsg::Ping { updates, .. }
            | GossipMsg::Ack { updates, .. }
            | GossipMsg::PingReq { updates, .. } => updates,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GossipMsg::Ping { .. } => "ping",
            GossipMsg::Ack { .. } => "ack",
            GossipMsg::PingReq { .. } => "ping-req",
        }
    }
}

/// A datagram to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: String,
    pub msg: GossipMsg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemberState {
    pub node: NodeId,
    pub addr: String,
    pub status: Status,
    pub status_incarnation: u64,
    #[serde(skip)]
    pub last_update: Timestamp,
    pub tags: BTreeMap<String, String>,
}

impl MemberState {
    fn as_update(&self) -> Update {
        Update {
            node: self.node.id,
            node_inc: self.node.incarnation,
            addr: self.addr.clone(),
            status: self.status,
            status_inc: self.status_incarnation,
            tags: self.tags.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberEvent {
    Joined(NodeId),
    Suspected(NodeId),
    Dead(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProbePhase {
    Direct,
    Indirect,
}

#[derive(Debug, Clone)]
struct Probe {
    target: u32,
    seq: u64,
    phase: ProbePhase,
    acked: bool,
}

#[derive(Debug, Clone)]
struct Pending {
    update: Update,
    sent: u32,
}

/// Counters useful for tests and diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwimStats {
    pub pings_sent: u64,
    pub ping_reqs_sent: u64,
    pub suspect_transitions: u64,
    pub dead_transitions: u64,
    pub malformed_dropped: u64,
}

/// SWIM failure detector and dissemination state for one node.
///
/// The driver calls [`Swim::tick`] once per protocol period and feeds every
/// received datagram to [`Swim::handle`]. Both return the datagrams to send.
pub struct Swim {
    me: Update,
    config: SwimConfig,
    seeds: Vec<String>,
    members: HashMap<u32, MemberState>,
    suspect_since: HashMap<u32, Timestamp>,
    pending: HashMap<u32, Pending>,
    probe: Option<Probe>,
    probe_order: Vec<u32>,
    next_seq: u64,
    // our ping seq -> (requester addr, requester seq)
    relays: HashMap<u64, (String, u64)>,
    events: Vec<MemberEvent>,
    stats: SwimStats,
    rng: Xoshiro256PlusPlus,
}

impl Swim {
    pub fn new(me: NodeId, addr: impl Into<String>, config: SwimConfig, rng_seed: u64) -> Self {
        Self {
            me: Update {
                node: me.id,
                node_inc: me.incarnation,
                addr: addr.into(),
                status: Status::Alive,
                status_inc: 0,
                tags: BTreeMap::new(),
            },
            config,
            seeds: Vec::new(),
            members: HashMap::new(),
            suspect_since: HashMap::new(),
            pending: HashMap::new(),
            probe: None,
            probe_order: Vec::new(),
            next_seq: 1,
            relays: HashMap::new(),
            events: Vec::new(),
            stats: SwimStats::default(),
            rng: Xoshiro256PlusPlus::seed_from_u64(rng_seed),
        }
    }

    pub fn with_tags(mut self, tags: BTreeMap<String, String>) -> Self {
        self.me.tags = tags;
        self
    }

    pub fn node(&self) -> NodeId {
        self.me.node_id()
    }

    pub fn config(&self) -> &SwimConfig {
        &self.config
    }

    pub fn stats(&self) -> &SwimStats {
        &self.stats
    }

    pub fn status_incarnation(&self) -> u64 {
        self.me.status_inc
    }

    /// Records the seed addresses and emits an initial ping to each. Seeds are
    /// re-pinged every period for as long as no other member is known alive.
    pub fn join(&mut self, seeds: &[String]) -> Vec<Outbound> {
        self.seeds = seeds.iter().filter(|s| **s != self.me.addr).cloned().collect();
        self.ping_seeds()
    }

    fn ping_seeds(&mut self) -> Vec<Outbound> {
        let seeds = self.seeds.clone();
        seeds
            .into_iter()
            .map(|to| {
                let seq = self.alloc_seq();
                self.stats.pings_sent += 1;
                let msg = GossipMsg::Ping { from: self.me.clone(), seq, updates: self.piggyback() };
                Outbound { to, msg }
            })
            .collect()
    }

    fn alloc_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn self_state(&self) -> MemberState {
        MemberState {
            node: self.me.node_id(),
            addr: self.me.addr.clone(),
            status: Status::Alive,
            status_incarnation: self.me.status_inc,
            last_update: Duration::ZERO,
            tags: self.me.tags.clone(),
        }
    }

    /// Snapshot of members with status Alive, including this node.
    pub fn alive_members(&self) -> Vec<MemberState> {
        let mut out: Vec<MemberState> =
            self.members.values().filter(|m| m.status == Status::Alive).cloned().collect();
        out.push(self.self_state());
        out.sort_by_key(|m| m.node.id);
        out
    }

    /// Every known member (any status), including this node.
    pub fn members(&self) -> Vec<MemberState> {
        let mut out: Vec<MemberState> = self.members.values().cloned().collect();
        out.push(self.self_state());
        out.sort_by_key(|m| m.node.id);
        out
    }

    pub fn member(&self, id: u32) -> Option<MemberState> {
        if id == self.me.node {
            return Some(self.self_state());
        }
        self.members.get(&id).cloned()
    }

    pub fn drain_events(&mut self) -> Vec<MemberEvent> {
        std::mem::take(&mut self.events)
    }

    fn live_peer_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> =
            self.members.values().filter(|m| m.status != Status::Dead).map(|m| m.node.id).collect();
        ids.sort_unstable();
        ids
    }

    fn retransmit_limit(&self) -> u32 {
        let n = self.members.len() as f64 + 1.0;
        3 * ((n + 1.0).log2().ceil() as u32).max(1)
    }

    fn enqueue(&mut self, update: Update) {
        self.pending.insert(update.node, Pending { update, sent: 0 });
    }

    fn piggyback(&mut self) -> Vec<Update> {
        let limit = self.retransmit_limit();
        let mut keys: Vec<(u32, u32)> = self.pending.iter().map(|(k, p)| (p.sent, *k)).collect();
        keys.sort_unstable();
        let mut out = Vec::new();
        for (_, k) in keys.into_iter().take(self.config.piggyback_limit) {
            let p = self.pending.get_mut(&k).expect("pending key");
            p.sent += 1;
            out.push(p.update.clone());
            if p.sent >= limit {
                self.pending.remove(&k);
            }
        }
        out
    }

    fn next_probe_target(&mut self) -> Option<u32> {
        loop {
            if self.probe_order.is_empty() {
                self.probe_order = self.live_peer_ids();
                if self.probe_order.is_empty() {
                    return None;
                }
                self.probe_order.shuffle(&mut self.rng);
            }
            let id = self.probe_order.pop()?;
            if self.members.get(&id).is_some_and(|m| m.status != Status::Dead) {
                return Some(id);
            }
        }
    }

    fn set_status(&mut self, id: u32, status: Status, now: Timestamp) {
        let Some(m) = self.members.get_mut(&id) else { return };
        if m.status == status {
            return;
        }
        m.status = status;
        m.last_update = now;
        let node = m.node;
        let update = m.as_update();
        match status {
            Status::Suspect => {
                self.stats.suspect_transitions += 1;
                self.suspect_since.insert(id, now);
                self.events.push(MemberEvent::Suspected(node));
            }
            Status::Dead => {
                self.stats.dead_transitions += 1;
                self.suspect_since.remove(&id);
                self.events.push(MemberEvent::Dead(node));
                if self.probe.as_ref().is_some_and(|p| p.target == id) {
                    self.probe = None;
                }
            }
            Status::Alive => {
                self.suspect_since.remove(&id);
            }
        }
        self.enqueue(update);
    }

    /// One protocol period: expire suspicions, advance the probe, re-ping seeds.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Outbound> {
        let mut out = Vec::new();

        let expired: Vec<u32> = self
            .suspect_since
            .iter()
            .filter(|(_, since)| now.saturating_sub(**since) >= self.config.suspect_timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            self.set_status(id, Status::Dead, now);
        }

        let mut start_new = true;
        if let Some(probe) = self.probe.take() {
            let target_live = self.members.get(&probe.target).is_some_and(|m| m.status != Status::Dead);
            if target_live && !probe.acked {
                match probe.phase {
                    ProbePhase::Direct => {
                        out.extend(self.indirect_probe(&probe));
                        self.probe = Some(Probe { phase: ProbePhase::Indirect, ..probe });
                        start_new = false;
                    }
                    ProbePhase::Indirect => {
                        if self.members.get(&probe.target).is_some_and(|m| m.status == Status::Alive) {
                            self.set_status(probe.target, Status::Suspect, now);
                        }
                    }
                }
            }
        }

        if start_new {
            if let Some(target) = self.next_probe_target() {
                let seq = self.alloc_seq();
                let to = self.members[&target].addr.clone();
                self.stats.pings_sent += 1;
                out.push(Outbound { to, msg: GossipMsg::Ping { from: self.me.clone(), seq, updates: self.piggyback() } });
                self.probe = Some(Probe { target, seq, phase: ProbePhase::Direct, acked: false });
            }
        }

        if !self.seeds.is_empty() && self.live_peer_ids().is_empty() {
            out.extend(self.ping_seeds());
        }
        out
    }

    fn indirect_probe(&mut self, probe: &Probe) -> Vec<Outbound> {
        let mut helpers: Vec<u32> = self
            .members
            .values()
            .filter(|m| m.status == Status::Alive && m.node.id != probe.target)
            .map(|m| m.node.id)
            .collect();
        helpers.sort_unstable();
        helpers.shuffle(&mut self.rng);
        helpers.truncate(self.config.indirect_probes);
        let target_addr = self.members[&probe.target].addr.clone();
        helpers
            .into_iter()
            .map(|h| {
                self.stats.ping_reqs_sent += 1;
                let to = self.members[&h].addr.clone();
                let msg = GossipMsg::PingReq {
                    from: self.me.clone(),
                    seq: probe.seq,
                    target: probe.target,
                    target_addr: target_addr.clone(),
                    updates: self.piggyback(),
                };
                Outbound { to, msg }
            })
            .collect()
    }

    /// Counts a datagram that failed to decode.
    pub fn note_malformed(&mut self) {
        self.stats.malformed_dropped += 1;
    }

    /// Processes one received message.
    pub fn handle(&mut self, msg: GossipMsg, now: Timestamp) -> Vec<Outbound> {
        self.apply(msg.from().clone(), now);
        for u in msg.updates().to_vec() {
            self.apply(u, now);
        }
        match msg {
            GossipMsg::Ping { from, seq, .. } => {
                vec![Outbound { to: from.addr, msg: GossipMsg::Ack { from: self.me.clone(), seq, updates: self.piggyback() } }]
            }
            GossipMsg::Ack { seq, .. } => {
                if let Some(p) = self.probe.as_mut() {
                    if p.seq == seq {
                        p.acked = true;
                    }
                }
                if let Some((requester, their_seq)) = self.relays.remove(&seq) {
                    let msg = GossipMsg::Ack { from: self.me.clone(), seq: their_seq, updates: self.piggyback() };
                    return vec![Outbound { to: requester, msg }];
                }
                Vec::new()
            }
            GossipMsg::PingReq { from, seq, target_addr, .. } => {
                let own = self.alloc_seq();
                self.relays.insert(own, (from.addr, seq));
                if self.relays.len() > 1024 {
                    let oldest = *self.relays.keys().min().expect("non-empty");
                    self.relays.remove(&oldest);
                }
                self.stats.pings_sent += 1;
                vec![Outbound { to: target_addr, msg: GossipMsg::Ping { from: self.me.clone(), seq: own, updates: self.piggyback() } }]
            }
        }
    }

    fn apply(&mut self, u: Update, now: Timestamp) {
        if u.node == self.me.node {
            self.apply_about_self(&u);
            return;
        }
        let Some(held) = self.members.get(&u.node) else {
            if u.status != Status::Dead {
                self.insert_member(u, now);
            }
            return;
        };
        if u.node_inc > held.node.incarnation {
            // restarted agent: the old incarnation is gone
            if held.status != Status::Dead {
                self.set_status(u.node, Status::Dead, now);
            }
            if u.status != Status::Dead {
                self.insert_member(u, now);
            }
            return;
        }
        if u.node_inc < held.node.incarnation || held.status == Status::Dead {
            return;
        }
        let newer = (u.status_inc, u.status.precedence()) > (held.status_incarnation, held.status.precedence());
        if !newer {
            return;
        }
        let id = u.node;
        let prev = held.status;
        {
            let m = self.members.get_mut(&id).expect("held member");
            m.status_incarnation = u.status_inc;
            m.addr = u.addr.clone();
            if u.status == Status::Alive {
                m.tags = u.tags.clone();
            }
        }
        if prev == u.status {
            // same status, newer incarnation: just disseminate
            self.enqueue(u);
        } else {
            self.set_status(id, u.status, now);
        }
    }

    fn insert_member(&mut self, u: Update, now: Timestamp) {
        let node = u.node_id();
        let state = MemberState {
            node,
            addr: u.addr.clone(),
            status: Status::Alive,
            status_incarnation: u.status_inc,
            last_update: now,
            tags: u.tags.clone(),
        };
        let status = u.status;
        self.members.insert(u.node, state);
        self.events.push(MemberEvent::Joined(node));
        let mut alive = u;
        alive.status = Status::Alive;
        self.enqueue(alive);
        if status == Status::Suspect {
            self.set_status(node.id, Status::Suspect, now);
        }
    }

    fn apply_about_self(&mut self, u: &Update) {
        if u.node_inc != self.me.node_inc {
            return;
        }
        if u.status != Status::Alive && u.status_inc >= self.me.status_inc {
            self.me.status_inc = u.status_inc + 1;
            let refute = self.me.clone();
            self.enqueue(refute);
        }
    }

    /// Messages announcing this node's departure to every live member.
    pub fn leave(&mut self) -> Vec<Outbound> {
        let mut dead = self.me.clone();
        dead.status = Status::Dead;
        dead.status_inc = self.me.status_inc;
        let targets: Vec<String> = self
            .members
            .values()
            .filter(|m| m.status != Status::Dead)
            .map(|m| m.addr.clone())
            .collect();
        targets
            .into_iter()
            .map(|to| {
                let seq = self.alloc_seq();
                Outbound { to, msg: GossipMsg::Ping { from: self.me.clone(), seq, updates: vec![dead.clone()] } }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(node: u32, status: Status, inc: u64) -> Update {
        Update { node, node_inc: 1, addr: format!("n{node}"), status, status_inc: inc, tags: BTreeMap::new() }
    }

    fn swim_with_b(status: Status, inc: u64) -> Swim {
        let mut s = Swim::new(NodeId::new(1, 1), "n1", SwimConfig::default(), 1);
        s.apply(upd(2, Status::Alive, inc), Duration::ZERO);
        if status != Status::Alive {
            s.apply(upd(2, status, inc), Duration::ZERO);
        }
        s.drain_events();
        s
    }

    #[test]
    fn suspect_overrides_alive_same_incarnation() {
        let mut s = swim_with_b(Status::Alive, 4);
        s.apply(upd(2, Status::Suspect, 4), Duration::ZERO);
        assert_eq!(s.member(2).unwrap().status, Status::Suspect);
    }

    #[test]
    fn higher_alive_refutes_suspect() {
        let mut s = swim_with_b(Status::Suspect, 4);
        s.apply(upd(2, Status::Alive, 5), Duration::ZERO);
        let m = s.member(2).unwrap();
        assert_eq!((m.status, m.status_incarnation), (Status::Alive, 5));
    }

    #[test]
    fn stale_alive_ignored() {
        let mut s = swim_with_b(Status::Suspect, 4);
        s.apply(upd(2, Status::Alive, 3), Duration::ZERO);
        assert_eq!(s.member(2).unwrap().status, Status::Suspect);
    }

    #[test]
    fn dead_is_terminal_until_new_incarnation() {
        let mut s = swim_with_b(Status::Dead, 4);
        s.apply(upd(2, Status::Alive, 99), Duration::ZERO);
        assert_eq!(s.member(2).unwrap().status, Status::Dead);
        let mut rejoin = upd(2, Status::Alive, 0);
        rejoin.node_inc = 2;
        s.apply(rejoin, Duration::ZERO);
        let m = s.member(2).unwrap();
        assert_eq!((m.status, m.node.incarnation), (Status::Alive, 2));
    }

    #[test]
    fn self_suspicion_is_refuted() {
        let mut s = Swim::new(NodeId::new(1, 1), "n1", SwimConfig::default(), 1);
        s.apply(upd(1, Status::Suspect, 0), Duration::ZERO);
        assert_eq!(s.status_incarnation(), 1);
        let gossip = s.piggyback();
        assert!(gossip.iter().any(|u| u.node == 1 && u.status == Status::Alive && u.status_inc == 1));
    }

    #[test]
    fn singleton_view() {
        let s = Swim::new(NodeId::new(4, 1), "n4", SwimConfig::default(), 1);
        let alive = s.alive_members();
        assert_eq!(alive.len(), 1);
        assert_eq!(alive[0].node, NodeId::new(4, 1));
    }

    #[test]
    fn config_validation() {
        assert!(SwimConfig::default().validate().is_ok());
        let bad = SwimConfig { indirect_probes: 0, ..SwimConfig::default() };
        assert_eq!(bad.validate(), Err(SwimConfigError::NoIndirectProbes));
        let bad = SwimConfig { suspect_timeout: Duration::from_millis(10), ..SwimConfig::default() };
        assert_eq!(bad.validate(), Err(SwimConfigError::SuspectTooShort));
    }

    #[test]
    fn gossip_wire_shape() {
        let msg = GossipMsg::Ping { from: upd(1, Status::Alive, 0), seq: 3, updates: vec![upd(2, Status::Suspect, 4)] };
        let v = serde_json::to_value(&msg).unwrap();
        assert_eq!(v["t"], "ping");
        assert_eq!(v["updates"][0]["status"], "suspect");
        assert_eq!(v["updates"][0]["status_inc"], 4);
        assert_eq!(v["updates"][0]["addr"], "n2");
    }
}
