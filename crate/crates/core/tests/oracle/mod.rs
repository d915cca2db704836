//! Exhaustive-enumeration oracle for rank-and-assign, shared by the core
//! tests and the acceptance suite.

use std::collections::BTreeMap;
use std::time::Duration;

use nefele_core::placement::{rank_and_assign, NodeLedger, Offer, Rejection, ScoreWeights};
use nefele_core::{NodeId, ResourceVector, SpawnRequest, TaskSpec, GIB};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const TTL: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy)]
pub struct FrozenNode {
    pub id: u32,
    pub capacity: (u64, u64),
    pub allocated: (u64, u64),
    pub var: f64,
}

// Oracle side: brute-force fit count and a direct transcription of the score.
pub fn oracle_fit(req: (u64, u64), free: (u64, u64), n: u64) -> u64 {
    (0..=n).rev().find(|k| k * req.0 <= free.0 && k * req.1 <= free.1).unwrap_or(0)
}

pub fn oracle_score(req: (u64, u64), k: u64, n: &FrozenNode) -> f64 {
    let mut fr = Vec::new();
    for (cap, alloc, r) in [(n.capacity.0, n.allocated.0, req.0), (n.capacity.1, n.allocated.1, req.1)] {
        if cap > 0 {
            fr.push((cap as f64 - alloc as f64 - (k * r) as f64) / cap as f64);
        }
    }
    let lo = fr.iter().cloned().fold(f64::MAX, f64::min);
    let hi = fr.iter().cloned().fold(f64::MIN, f64::max);
    lo - 0.5 * (hi - lo) - 0.5 * n.var.sqrt()
}

/// Best per-node task counts: maximise the summed per-task score; among
/// equal totals prefer more tasks on better-ranked nodes (score desc, id asc).
pub fn oracle_best(nodes: &[FrozenNode], req: (u64, u64), n: u64, anti: bool) -> Option<BTreeMap<u32, u64>> {
    let offers: Vec<(u32, u64, f64)> = nodes
        .iter()
        .filter_map(|nd| {
            let free = (nd.capacity.0 - nd.allocated.0, nd.capacity.1 - nd.allocated.1);
            let k = oracle_fit(req, free, n);
            (k > 0).then(|| (nd.id, k, oracle_score(req, k, nd)))
        })
        .collect();
    let mut ranked = offers.clone();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));

    let caps: Vec<u64> = ranked.iter().map(|o| if anti { o.1.min(1) } else { o.1 }).collect();
    let mut best: Option<(f64, Vec<u64>)> = None;
    let mut counts = vec![0u64; ranked.len()];
    fn walk(i: usize, left: u64, caps: &[u64], ranked: &[(u32, u64, f64)], counts: &mut Vec<u64>, best: &mut Option<(f64, Vec<u64>)>) {
        if i == caps.len() {
            if left != 0 {
                return;
            }
            let obj: f64 = counts.iter().zip(ranked).map(|(c, o)| *c as f64 * o.2).sum();
            let better = match best {
                None => true,
                Some((b, bc)) => obj > *b + 1e-9 || ((obj - *b).abs() <= 1e-9 && counts > bc),
            };
            if better {
                *best = Some((obj, counts.clone()));
            }
            return;
        }
        for c in 0..=caps[i].min(left) {
            counts[i] = c;
            walk(i + 1, left - c, caps, ranked, counts, best);
        }
        counts[i] = 0;
    }
    walk(0, n, &caps, &ranked, &mut counts, &mut best);
    best.map(|(_, cs)| {
        ranked.iter().zip(cs).filter(|(_, c)| *c > 0).map(|(o, c)| (o.0, c)).collect()
    })
}

pub fn random_instance(rng: &mut Xoshiro256PlusPlus) -> (Vec<FrozenNode>, (u64, u64), u64, bool) {
    let n_nodes = rng.gen_range(1..=4);
    let mut nodes: Vec<FrozenNode> = Vec::new();
    for id in 1..=n_nodes {
        if id > 1 && rng.gen_bool(0.25) {
            // duplicate an earlier node's state to force score ties
            let src = nodes[rng.gen_range(0..nodes.len())];
            nodes.push(FrozenNode { id, ..src });
            continue;
        }
        let cap = ([4000, 8000, 16000][rng.gen_range(0..3)], [8, 16, 32][rng.gen_range(0..3)] * GIB);
        let alloc = (rng.gen_range(0..=cap.0 / 500) * 500, rng.gen_range(0..=cap.1 / GIB) * GIB);
        let var = [0.0, 0.01, 0.04, rng.gen_range(0.0..0.1)][rng.gen_range(0..4)];
        nodes.push(FrozenNode { id, capacity: cap, allocated: alloc, var });
    }
    let req = (rng.gen_range(1..=8) * 500, rng.gen_range(0..=4) * GIB);
    (nodes, req, rng.gen_range(1..=4), rng.gen_bool(0.3))
}

pub fn implementation(nodes: &[FrozenNode], req: (u64, u64), n: u64, anti: bool) -> Result<BTreeMap<u32, u64>, Rejection> {
    let mut task = TaskSpec::new("/bin/true", ResourceVector::new(req.0, req.1));
    if anti {
        task.anti_affinity_group = Some("g".into());
    }
    let request = SpawnRequest::nspawn("t", task, n as usize);
    let offers: Vec<Offer> = nodes
        .iter()
        .filter_map(|nd| {
            let mut l = NodeLedger::new(NodeId::new(nd.id, 1), ResourceVector::new(nd.capacity.0, nd.capacity.1));
            assert!(l.allocate(ResourceVector::new(nd.allocated.0, nd.allocated.1)));
            l.set_utilization(0.0, nd.var);
            l.feasibility_check(request.request_id, 0, &ResourceVector::new(req.0, req.1), n, Duration::ZERO, TTL, &ScoreWeights::default())
        })
        .collect();
    let plan = rank_and_assign(&offers, &request)?;
    Ok(plan.counts_by_node().into_iter().map(|(k, v)| (k, v as u64)).collect())
}

/// Runs `count` random instances; returns (placed, rejected) or the first
/// disagreement.
pub fn check_instances(seed: u64, count: usize) -> Result<(usize, usize), String> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (mut placed, mut rejected) = (0, 0);
    for i in 0..count {
        let (nodes, req, n, anti) = random_instance(&mut rng);
        let expected = oracle_best(&nodes, req, n, anti);
        let got = implementation(&nodes, req, n, anti);
        match (&expected, &got) {
            (Some(e), Ok(g)) if e == g => placed += 1,
            (None, Err(_)) => rejected += 1,
            _ => return Err(format!("instance {i} disagrees: oracle {expected:?} vs {got:?} ({nodes:?} req={req:?} n={n} anti={anti})")),
        }
    }
    Ok((placed, rejected))
}
