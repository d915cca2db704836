use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::ledger::Offer;
use crate::model::{NodeId, ResourceVector, SpawnRequest};

/// Tasks of a request that share resources and anti-affinity group; each
/// class gets its own round of feasibility queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskClass {
    pub resources: ResourceVector,
    pub group: Option<String>,
    pub indices: Vec<usize>,
}

/// Groups the request's tasks into classes, in order of first appearance.
pub fn task_classes(req: &SpawnRequest) -> Vec<TaskClass> {
    let mut classes: Vec<TaskClass> = Vec::new();
    for (i, t) in req.tasks.iter().enumerate() {
        match classes
            .iter_mut()
            .find(|c| c.resources == t.resources && c.group == t.anti_affinity_group)
        {
            Some(c) => c.indices.push(i),
            None => classes.push(TaskClass {
                resources: t.resources,
                group: t.anti_affinity_group.clone(),
                indices: vec![i],
            }),
        }
    }
    classes
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub node: NodeId,
    pub class: usize,
    pub reservation_id: Uuid,
    pub tasks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub request_id: Uuid,
    pub assignments: Vec<Assignment>,
}

impl PlacementPlan {
    /// Tasks assigned per node id.
    pub fn counts_by_node(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for a in &self.assignments {
            *out.entry(a.node.id).or_insert(0) += a.tasks.len();
        }
        out
    }

    /// Reservations that the plan uses.
    pub fn used_reservations(&self) -> HashSet<Uuid> {
        self.assignments.iter().map(|a| a.reservation_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rejection {
    NoFeasibleNodes,
    InsufficientCapacity { placeable: usize, wanted: usize },
    NodeLost { node: u32 },
    SpawnFailed { detail: String },
    Invalid { detail: String },
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::NoFeasibleNodes => write!(f, "insufficient capacity: no feasible nodes"),
            Rejection::InsufficientCapacity { placeable, wanted } => {
                write!(f, "insufficient capacity: {placeable} of {wanted} tasks placeable")
            }
            Rejection::NodeLost { node } => write!(f, "node {node} lost during deployment"),
            Rejection::SpawnFailed { detail } => write!(f, "spawn failed: {detail}"),
            Rejection::Invalid { detail } => write!(f, "invalid request: {detail}"),
        }
    }
}

/// Ranking order: score descending, then node id ascending.
fn rank(a: &Offer, b: &Offer) -> Ordering {
    b.score.total_cmp(&a.score).then(a.node.id.cmp(&b.node.id))
}

/// Ranks offers and greedily assigns the request's tasks: each class walks
/// its offers best-first and fills each up to `max_tasks`, with at most one
/// task per node for classes in an anti-affinity group. All-or-nothing:
/// any class left short rejects the whole request.
///
/// Pure function of `(offers, req)`.
pub fn rank_and_assign(offers: &[Offer], req: &SpawnRequest) -> Result<PlacementPlan, Rejection> {
    if offers.is_empty() {
        return Err(Rejection::NoFeasibleNodes);
    }
    let classes = task_classes(req);
    let mut by_class: HashMap<usize, Vec<&Offer>> = HashMap::new();
    for o in offers.iter().filter(|o| o.request_id == req.request_id && o.max_tasks > 0) {
        by_class.entry(o.class).or_default().push(o);
    }
    let mut group_nodes: HashMap<&str, HashSet<u32>> = HashMap::new();
    let mut assignments = Vec::new();
    let mut placeable = 0;
    for (ci, class) in classes.iter().enumerate() {
        let mut ranked: Vec<&Offer> = by_class.remove(&ci).unwrap_or_default();
        ranked.sort_by(|a, b| rank(a, b));
        let mut todo = &class.indices[..];
        for offer in ranked {
            if todo.is_empty() {
                break;
            }
            let mut take = (offer.max_tasks as usize).min(todo.len());
            if let Some(g) = class.group.as_deref() {
                let used = group_nodes.entry(g).or_default();
                if used.contains(&offer.node.id) {
                    continue;
                }
                take = take.min(1);
                used.insert(offer.node.id);
            }
            let (now, rest) = todo.split_at(take);
            assignments.push(Assignment {
                node: offer.node,
                class: ci,
                reservation_id: offer.reservation_id,
                tasks: now.to_vec(),
            });
            todo = rest;
        }
        placeable += class.indices.len() - todo.len();
    }
    if placeable < req.tasks.len() {
        return Err(Rejection::InsufficientCapacity { placeable, wanted: req.tasks.len() });
    }
    Ok(PlacementPlan { request_id: req.request_id, assignments })
}
