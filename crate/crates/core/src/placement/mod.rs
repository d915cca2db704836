//! Decentralized feasibility-and-ranking placement: per-node ledgers answer
//! feasibility queries with scored offers, and the admission node ranks the
//! offers and assigns the gang.

mod assign;
mod ledger;
mod score;

pub use assign::{rank_and_assign, task_classes, Assignment, PlacementPlan, Rejection, TaskClass};
pub use ledger::{LedgerError, NodeLedger, Offer, Reservation};
pub use score::{evaluate_offers, evaluate_offers_seq, score, NodeLoadState, ScoreError, ScoreWeights};
