//! Deterministic in-memory network for driving [`Swim`] instances on a
//! simulated clock.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{MemberEvent, Outbound, Status, Swim, SwimConfig};
use crate::frame;
use crate::model::NodeId;
use crate::par::par_map;

fn addr_of(id: u32) -> String {
    format!("sim-{id}")
}

fn id_of(addr: &str) -> Option<u32> {
    addr.strip_prefix("sim-")?.parse().ok()
}

pub struct SimCluster {
    config: SwimConfig,
    nodes: BTreeMap<u32, Swim>,
    crashed: HashSet<u32>,
    blocked: HashSet<(u32, u32)>,
    incarnations: BTreeMap<u32, u32>,
    events: BTreeMap<u32, Vec<(Duration, MemberEvent)>>,
    now: Duration,
    loss: f64,
    rng: Xoshiro256PlusPlus,
    seed: u64,
    delivered: u64,
}

impl SimCluster {
    pub fn new(config: SwimConfig, seed: u64) -> Self {
        Self {
            config,
            nodes: BTreeMap::new(),
            crashed: HashSet::new(),
            blocked: HashSet::new(),
            incarnations: BTreeMap::new(),
            events: BTreeMap::new(),
            now: Duration::ZERO,
            loss: 0.0,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            seed,
            delivered: 0,
        }
    }

    /// Builds `n` nodes (ids 1..=n), each seeded with node 1, and runs until
    /// every node sees all `n` alive or `limit` elapses.
    pub fn converged(config: SwimConfig, n: u32, seed: u64, limit: Duration) -> Self {
        let mut sim = Self::new(config, seed);
        for id in 1..=n {
            let seeds = if id == 1 { vec![] } else { vec![1] };
            sim.add_node(id, &seeds);
        }
        let deadline = sim.now + limit;
        while sim.now < deadline && !sim.all_see(n as usize) {
            sim.step();
        }
        sim
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn set_loss(&mut self, p: f64) {
        self.loss = p;
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn add_node(&mut self, id: u32, seeds: &[u32]) {
        let inc = self.incarnations.entry(id).and_modify(|i| *i += 1).or_insert(1);
        let node_seed = self.seed ^ ((id as u64) << 32) ^ *inc as u64;
        let mut swim = Swim::new(NodeId::new(id, *inc), addr_of(id), self.config.clone(), node_seed);
        let seed_addrs: Vec<String> = seeds.iter().map(|s| addr_of(*s)).collect();
        let out = swim.join(&seed_addrs);
        self.nodes.insert(id, swim);
        self.crashed.remove(&id);
        self.deliver(out);
        self.collect_events();
    }

    /// Stops a node: it neither sends nor receives until restarted.
    pub fn crash(&mut self, id: u32) {
        self.crashed.insert(id);
    }

    /// Restarts a crashed node with a bumped incarnation.
    pub fn restart(&mut self, id: u32, seeds: &[u32]) {
        self.add_node(id, seeds);
    }

    /// Drops every datagram between `a` and `b`, both directions.
    pub fn block_link(&mut self, a: u32, b: u32) {
        self.blocked.insert((a, b));
        self.blocked.insert((b, a));
    }

    pub fn node(&self, id: u32) -> &Swim {
        &self.nodes[&id]
    }

    pub fn live_ids(&self) -> Vec<u32> {
        self.nodes.keys().copied().filter(|id| !self.crashed.contains(id)).collect()
    }

    pub fn alive_view(&self, id: u32) -> Vec<u32> {
        self.nodes[&id].alive_members().iter().map(|m| m.node.id).collect()
    }

    pub fn status_seen_by(&self, observer: u32, target: u32) -> Option<Status> {
        self.nodes[&observer].member(target).map(|m| m.status)
    }

    pub fn events(&self, id: u32) -> &[(Duration, MemberEvent)] {
        self.events.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    fn all_see(&self, n: usize) -> bool {
        self.live_ids().iter().all(|id| self.alive_view(*id).len() == n)
    }

    /// Advances the clock by one protocol period and ticks every live node.
    pub fn step(&mut self) {
        self.now += self.config.protocol_period;
        let now = self.now;
        let mut out = Vec::new();
        for id in self.live_ids() {
            out.extend(self.nodes.get_mut(&id).expect("node").tick(now));
        }
        self.deliver(out);
        self.collect_events();
    }

    pub fn run_for(&mut self, d: Duration) {
        let end = self.now + d;
        while self.now < end {
            self.step();
        }
    }

    fn deliver(&mut self, out: Vec<Outbound>) {
        let mut queue: VecDeque<Outbound> = out.into();
        while let Some(ob) = queue.pop_front() {
            let Some(dst) = id_of(&ob.to) else { continue };
            if self.crashed.contains(&dst) || !self.nodes.contains_key(&dst) {
                continue;
            }
            let src = ob.msg.from().node;
            if self.blocked.contains(&(src, dst)) {
                continue;
            }
            if self.loss > 0.0 && self.rng.gen_bool(self.loss) {
                continue;
            }
            let bytes = frame::encode(&ob.msg).expect("encodable gossip");
            let now = self.now;
            let node = self.nodes.get_mut(&dst).expect("node");
            match frame::decode_datagram(&bytes) {
                Ok(msg) => {
                    self.delivered += 1;
                    queue.extend(node.handle(msg, now));
                }
                Err(_) => node.note_malformed(),
            }
        }
    }

    fn collect_events(&mut self) {
        let now = self.now;
        for (id, swim) in self.nodes.iter_mut() {
            let evs = swim.drain_events();
            self.events.entry(*id).or_default().extend(evs.into_iter().map(|e| (now, e)));
        }
    }

    pub fn total_suspect_transitions(&self) -> u64 {
        self.nodes.values().map(|s| s.stats().suspect_transitions).sum()
    }
}

/// Crashes node `n` of a converged `n`-node cluster and returns the time until
/// every survivor holds it Dead, or `None` if that does not happen within 60 s.
pub fn detection_latency(config: &SwimConfig, n: u32, seed: u64) -> Option<Duration> {
    let mut sim = SimCluster::converged(config.clone(), n, seed, Duration::from_secs(30));
    // settle so the crash lands at a random phase of each prober's rotation
    let settle = seed % 7;
    for _ in 0..settle {
        sim.step();
    }
    let victim = n;
    let crashed_at = sim.now();
    sim.crash(victim);
    let limit = crashed_at + Duration::from_secs(60);
    while sim.now() < limit {
        sim.step();
        let done = sim
            .live_ids()
            .iter()
            .all(|id| sim.status_seen_by(*id, victim) == Some(Status::Dead));
        if done {
            return Some(sim.now() - crashed_at);
        }
    }
    None
}

/// Monte Carlo detection latency over many seeds (parallel when enabled).
pub fn detection_sweep(config: &SwimConfig, n: u32, seeds: &[u64]) -> Vec<Option<Duration>> {
    par_map(seeds, |s| detection_latency(config, n, *s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_join_converges_within_three_periods() {
        let mut sim = SimCluster::new(SwimConfig::default(), 1);
        sim.add_node(1, &[]);
        sim.add_node(2, &[1]);
        for _ in 0..3 {
            sim.step();
        }
        assert_eq!(sim.alive_view(1), vec![1, 2]);
        assert_eq!(sim.alive_view(2), vec![1, 2]);
    }

    #[test]
    fn steady_state_one_ping_per_tick() {
        let mut sim = SimCluster::converged(SwimConfig::default(), 5, 3, Duration::from_secs(10));
        sim.run_for(Duration::from_secs(2));
        let before: Vec<u64> = (1..=5).map(|id| sim.node(id).stats().pings_sent).collect();
        sim.step();
        for id in 1..=5u32 {
            let s = sim.node(id).stats();
            assert_eq!(s.pings_sent - before[id as usize - 1], 1, "node {id}");
            assert_eq!(s.ping_reqs_sent, 0);
        }
    }
}
