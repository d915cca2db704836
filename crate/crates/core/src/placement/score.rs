use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{max_fit_count, ResourceVector};
use crate::par::{par_map, seq_map};

/// Load snapshot a node scores itself against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeLoadState {
    pub capacity: ResourceVector,
    /// Resources held by live local processes plus outstanding reservations.
    pub allocated: ResourceVector,
    pub util_ewma: f64,
    pub util_var_ewma: f64,
}

impl NodeLoadState {
    pub fn idle(capacity: ResourceVector) -> Self {
        Self { capacity, allocated: ResourceVector::ZERO, util_ewma: 0.0, util_var_ewma: 0.0 }
    }

    pub fn free(&self) -> ResourceVector {
        self.capacity.saturating_sub(&self.allocated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub stranding: f64,
    pub oversubscription: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { stranding: 0.5, oversubscription: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("placing {0} tasks does not fit")]
    Infeasible(u64),
    #[error("node has no capacity in any dimension")]
    NoCapacity,
}

/// Node-local preference for hosting `k` tasks of `req`; higher is better.
///
/// With `f_d` the fraction of dimension `d` left free after placement:
/// `min f - w_s * (max f - min f) - w_o * sqrt(var)`. The first term favours
/// headroom, the spread term penalises stranding one dimension while the
/// other runs out, and the last term penalises nodes whose utilisation is
/// fluctuating. Dimensions with zero capacity are ignored.
pub fn score(req: &ResourceVector, k: u64, state: &NodeLoadState, weights: &ScoreWeights) -> Result<f64, ScoreError> {
    let need = req.checked_mul(k).ok_or(ScoreError::Infeasible(k))?;
    let after = state.allocated + need;
    if !after.le(&state.capacity) {
        return Err(ScoreError::Infeasible(k));
    }
    let dims = [(state.capacity.cpu, after.cpu), (state.capacity.mem, after.mem)];
    let fractions: Vec<f64> = dims
        .iter()
        .filter(|(cap, _)| *cap > 0)
        .map(|(cap, used)| (*cap - *used) as f64 / *cap as f64)
        .collect();
    if fractions.is_empty() {
        return Err(ScoreError::NoCapacity);
    }
    let min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = state.util_var_ewma.max(0.0);
    Ok(min - weights.stranding * (max - min) - weights.oversubscription * var.sqrt())
}

fn offer_for(req: &ResourceVector, n_wanted: u64, state: &NodeLoadState, weights: &ScoreWeights) -> Option<(u64, f64)> {
    let k = max_fit_count(req, &state.free()).ok()?.min(n_wanted);
    if k == 0 {
        return None;
    }
    score(req, k, state, weights).ok().map(|s| (k, s))
}

/// What every node in `states` would offer for `n_wanted` tasks of `req`:
/// `(max_tasks, score)` or `None`. Runs in parallel with the `parallel` feature.
pub fn evaluate_offers(
    states: &[NodeLoadState],
    req: &ResourceVector,
    n_wanted: u64,
    weights: &ScoreWeights,
) -> Vec<Option<(u64, f64)>> {
    par_map(states, |s| offer_for(req, n_wanted, s, weights))
}

/// Sequential form of [`evaluate_offers`].
pub fn evaluate_offers_seq(
    states: &[NodeLoadState],
    req: &ResourceVector,
    n_wanted: u64,
    weights: &ScoreWeights,
) -> Vec<Option<(u64, f64)>> {
    seq_map(states, |s| offer_for(req, n_wanted, s, weights))
}
