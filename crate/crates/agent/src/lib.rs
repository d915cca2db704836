//! The nefele node agent: membership over UDP gossip, placement over
//! persistent TCP links between agents, the local process runtime, the
//! messaging layer, the control socket, and the management HTTP API. Also
//! hosts the control-socket client shared by the `nef` CLI and the
//! benchmark harness.

pub mod admission;
pub mod agent;
pub mod bench;
pub mod client;
pub mod cluster;
pub mod cli;
pub mod config;
pub mod control;
pub mod gossip;
mod handlers;
pub mod http;
pub mod node;
pub mod peers;
pub mod proto;
pub mod router;
pub mod runtime;
pub mod sampler;
pub mod wire;

pub use agent::{Agent, ReadyInfo, StartError};
pub use client::{Client, ClientError};
pub use config::AgentConfig;
