//! Core state machines and domain types for a decentralized process
//! orchestrator: every node runs the same agent, gossips membership, places
//! gangs of tasks by feasibility and ranking, and shares one process and IPC
//! namespace with its peers.
//!
//! This crate holds no I/O. The agent crate drives these types over real
//! sockets and processes; the simulators here drive them deterministically.

pub mod frame;
pub mod logbuf;
pub mod membership;
pub mod messaging;
pub mod model;
pub mod par;
pub mod placement;
pub mod stats;
pub mod workload;

pub use model::{
    fits, format_npid, max_fit_count, parse_npid, ExitOutcome, NodeId, Npid, NpidError, ProcessRecord,
    ProcessState, ResourceError, ResourceVector, SpawnKind, SpawnRequest, TaskSpec, ValidationError, GIB,
};
