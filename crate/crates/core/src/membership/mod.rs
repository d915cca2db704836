//! SWIM-style failure detection and membership dissemination.

pub mod sim;
mod swim;

pub use swim::{
    GossipMsg, MemberEvent, MemberState, Outbound, Status, Swim, SwimConfig, SwimConfigError, SwimStats,
    Timestamp, Update,
};
