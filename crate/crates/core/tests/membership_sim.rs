use std::time::Duration;

use nefele_core::membership::sim::{detection_latency, detection_sweep, SimCluster};
use nefele_core::membership::{MemberEvent, Status, SwimConfig};

fn cfg() -> SwimConfig {
    SwimConfig::default()
}

fn bound(c: &SwimConfig) -> Duration {
    c.protocol_period * 10 + c.suspect_timeout
}

#[test]
fn healthy_sixty_seconds_has_no_suspicion() {
    let mut sim = SimCluster::converged(cfg(), 10, 42, Duration::from_secs(10));
    for id in 1..=10 {
        assert_eq!(sim.alive_view(id).len(), 10);
    }
    sim.run_for(Duration::from_secs(60));
    assert_eq!(sim.total_suspect_transitions(), 0);
    for id in 1..=10 {
        assert_eq!(sim.alive_view(id).len(), 10);
    }
}

#[test]
fn five_node_crash_detected_within_bound() {
    let c = cfg();
    for seed in 0..20 {
        let lat = detection_latency(&c, 5, seed).expect("detected");
        assert!(lat <= bound(&c), "seed {seed}: {lat:?}");
    }
}

#[test]
fn sweep_matches_sequential_runs() {
    let c = cfg();
    let seeds: Vec<u64> = (100..108).collect();
    let swept = detection_sweep(&c, 5, &seeds);
    let seq: Vec<_> = seeds.iter().map(|s| detection_latency(&c, 5, *s)).collect();
    assert_eq!(swept, seq);
}

#[test]
fn unreachable_target_probed_indirectly_without_suspicion() {
    let mut sim = SimCluster::converged(cfg(), 5, 7, Duration::from_secs(10));
    let before = sim.node(1).stats().ping_reqs_sent;
    sim.block_link(1, 2);
    sim.run_for(Duration::from_secs(5));
    let sent = sim.node(1).stats().ping_reqs_sent - before;
    assert!(sent >= 3 && sent % 3 == 0, "ping-reqs sent: {sent}");
    assert_eq!(sim.status_seen_by(1, 2), Some(Status::Alive));
    assert_eq!(sim.total_suspect_transitions(), 0);
}

#[test]
fn dead_callback_fires_once_per_incarnation() {
    let mut sim = SimCluster::converged(cfg(), 4, 9, Duration::from_secs(10));
    sim.crash(4);
    sim.run_for(Duration::from_secs(5));
    let deaths = |sim: &SimCluster| sim.events(1).iter().filter(|(_, e)| matches!(e, MemberEvent::Dead(n) if n.id == 4)).count();
    assert_eq!(deaths(&sim), 1);
    sim.run_for(Duration::from_secs(5));
    assert_eq!(deaths(&sim), 1);

    sim.restart(4, &[1]);
    sim.run_for(Duration::from_secs(3));
    assert_eq!(sim.status_seen_by(1, 4), Some(Status::Alive));
    assert_eq!(sim.node(1).member(4).unwrap().node.incarnation, 2);
    sim.crash(4);
    sim.run_for(Duration::from_secs(5));
    assert_eq!(deaths(&sim), 2);
}

#[test]
fn join_with_unreachable_seeds_converges_once_seed_starts() {
    let mut sim = SimCluster::new(cfg(), 3);
    sim.add_node(2, &[1]);
    sim.add_node(3, &[1]);
    sim.run_for(Duration::from_secs(2));
    assert_eq!(sim.alive_view(2), vec![2]);
    sim.add_node(1, &[]);
    sim.run_for(Duration::from_secs(3));
    for id in 1..=3 {
        assert_eq!(sim.alive_view(id), vec![1, 2, 3]);
    }
}

#[test]
fn lossy_network_eventually_converges_on_crash() {
    let mut sim = SimCluster::converged(cfg(), 6, 11, Duration::from_secs(10));
    sim.set_loss(0.05);
    sim.crash(6);
    sim.run_for(Duration::from_secs(10));
    for id in 1..=5 {
        assert_eq!(sim.status_seen_by(id, 6), Some(Status::Dead), "observer {id}");
    }
}
