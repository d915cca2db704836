use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use super::score::{score, NodeLoadState, ScoreWeights};
use crate::model::{max_fit_count, NodeId, ResourceVector};

/// A node's answer to a feasibility query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offer {
    pub node: NodeId,
    pub request_id: Uuid,
    /// Index of the task class this offer answers (see [`super::task_classes`]).
    #[serde(default)]
    pub class: usize,
    pub reservation_id: Uuid,
    pub max_tasks: u64,
    pub score: f64,
    /// Expiry on the offering node's clock, in milliseconds.
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub request_id: Uuid,
    pub per_task: ResourceVector,
    pub count: u64,
    pub expires_at: Duration,
}

impl Reservation {
    pub fn total(&self) -> ResourceVector {
        self.per_task.scale(self.count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("reservation {0} is unknown or expired")]
    UnknownReservation(Uuid),
    #[error("commit of {wanted} tasks exceeds the {reserved} reserved")]
    OverCommit { wanted: u64, reserved: u64 },
}

/// Capacity bookkeeping for one node: committed allocations plus soft
/// reservations that lapse at their expiry. `allocated + reserved` never
/// exceeds capacity.
#[derive(Debug, Clone)]
pub struct NodeLedger {
    node: NodeId,
    capacity: ResourceVector,
    allocated: ResourceVector,
    reservations: HashMap<Uuid, Reservation>,
    util_ewma: f64,
    util_var_ewma: f64,
}

impl NodeLedger {
    pub fn new(node: NodeId, capacity: ResourceVector) -> Self {
        Self {
            node,
            capacity,
            allocated: ResourceVector::ZERO,
            reservations: HashMap::new(),
            util_ewma: 0.0,
            util_var_ewma: 0.0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn capacity(&self) -> ResourceVector {
        self.capacity
    }

    pub fn allocated(&self) -> ResourceVector {
        self.allocated
    }

    pub fn reserved(&self) -> ResourceVector {
        self.reservations.values().map(Reservation::total).sum()
    }

    pub fn free(&self) -> ResourceVector {
        self.capacity.saturating_sub(&(self.allocated + self.reserved()))
    }

    pub fn reservation_count(&self) -> usize {
        self.reservations.len()
    }

    pub fn set_utilization(&mut self, ewma: f64, var_ewma: f64) {
        self.util_ewma = ewma.clamp(0.0, 1.0);
        self.util_var_ewma = var_ewma.max(0.0);
    }

    /// Load as seen by the scorer: reservations count as used.
    pub fn load_state(&self) -> NodeLoadState {
        NodeLoadState {
            capacity: self.capacity,
            allocated: self.allocated + self.reserved(),
            util_ewma: self.util_ewma,
            util_var_ewma: self.util_var_ewma,
        }
    }

    /// Drops reservations whose expiry is at or before `now`.
    pub fn expire(&mut self, now: Duration) -> usize {
        let before = self.reservations.len();
        self.reservations.retain(|_, r| r.expires_at > now);
        before - self.reservations.len()
    }

    /// Answers a feasibility query, soft-reserving the offered tasks until
    /// `now + ttl`. Returns `None` when not even one task fits.
    #[allow(clippy::too_many_arguments)]
    pub fn feasibility_check(
        &mut self,
        request_id: Uuid,
        class: usize,
        req: &ResourceVector,
        n_wanted: u64,
        now: Duration,
        ttl: Duration,
        weights: &ScoreWeights,
    ) -> Option<Offer> {
        self.expire(now);
        let state = self.load_state();
        let max_tasks = max_fit_count(req, &state.free()).ok()?.min(n_wanted);
        if max_tasks == 0 {
            return None;
        }
        let score = score(req, max_tasks, &state, weights).ok().filter(|s| s.is_finite())?;
        let reservation_id = Uuid::new_v4();
        let expires_at = now + ttl;
        self.reservations.insert(
            reservation_id,
            Reservation { request_id, per_task: *req, count: max_tasks, expires_at },
        );
        Some(Offer {
            node: self.node,
            request_id,
            class,
            reservation_id,
            max_tasks,
            score,
            expires_at_ms: expires_at.as_millis() as u64,
        })
    }

    /// Converts `count` reserved tasks into allocation and drops the rest of
    /// the reservation. Returns the newly allocated vector.
    pub fn commit(&mut self, reservation_id: Uuid, count: u64, now: Duration) -> Result<ResourceVector, LedgerError> {
        self.expire(now);
        let res = self
            .reservations
            .get(&reservation_id)
            .ok_or(LedgerError::UnknownReservation(reservation_id))?;
        if count > res.count {
            return Err(LedgerError::OverCommit { wanted: count, reserved: res.count });
        }
        let res = self.reservations.remove(&reservation_id).expect("checked above");
        let amount = res.per_task.scale(count);
        self.allocated = self.allocated + amount;
        Ok(amount)
    }

    pub fn release(&mut self, reservation_id: &Uuid) -> bool {
        self.reservations.remove(reservation_id).is_some()
    }

    /// Allocates directly, bypassing reservations, if it fits.
    pub fn allocate(&mut self, amount: ResourceVector) -> bool {
        if (amount).le(&self.free()) {
            self.allocated = self.allocated + amount;
            true
        } else {
            false
        }
    }

    pub fn deallocate(&mut self, amount: ResourceVector) {
        self.allocated = self.allocated.saturating_sub(&amount);
    }
}
