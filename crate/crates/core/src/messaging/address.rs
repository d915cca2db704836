use std::fmt;

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::frame::MAX_PAYLOAD_LEN;
use crate::model::{ExitOutcome, NodeId, Npid};

/// Registry key within a tenant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NameKey {
    Name(String),
    Service(u32),
    Topic(String),
}

impl fmt::Display for NameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NameKey::Name(n) => write!(f, "{n}"),
            NameKey::Service(id) => write!(f, "#{id}"),
            NameKey::Topic(t) => write!(f, "topic:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("invalid name {0:?}: expected [a-z0-9._-]{{1,128}}")]
    InvalidName(String),
    #[error("service ids must be positive")]
    ZeroServiceId,
    #[error("payload of {0} bytes exceeds the 1 MiB limit")]
    PayloadTooLarge(usize),
}

pub fn validate_name(name: &str) -> Result<(), AddressError> {
    let ok = (1..=128).contains(&name.len())
        && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(AddressError::InvalidName(name.to_string()))
    }
}

impl NameKey {
    pub fn validate(&self) -> Result<(), AddressError> {
        match self {
            NameKey::Name(n) | NameKey::Topic(n) => validate_name(n),
            NameKey::Service(0) => Err(AddressError::ZeroServiceId),
            NameKey::Service(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    Any,
    All,
}

/// Message destination. Name-like variants are scoped to a tenant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Address {
    Npid { npid: Npid },
    Name { tenant: String, name: String },
    Service { tenant: String, id: u32 },
    Topic { tenant: String, topic: String },
    Group { tenant: String, name: String, mode: GroupMode },
}

impl Address {
    pub fn validate(&self) -> Result<(), AddressError> {
        match self {
            Address::Npid { .. } => Ok(()),
            Address::Name { name, .. } | Address::Group { name, .. } => validate_name(name),
            Address::Topic { topic, .. } => validate_name(topic),
            Address::Service { id, .. } => NameKey::Service(*id).validate(),
        }
    }

    /// Tenant and registry key for name-like addresses.
    pub fn key(&self) -> Option<(&str, NameKey)> {
        match self {
            Address::Npid { .. } => None,
            Address::Name { tenant, name } | Address::Group { tenant, name, .. } => {
                Some((tenant, NameKey::Name(name.clone())))
            }
            Address::Service { tenant, id } => Some((tenant, NameKey::Service(*id))),
            Address::Topic { tenant, topic } => Some((tenant, NameKey::Topic(topic.clone()))),
        }
    }
}

/// One IPC message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub src: Npid,
    pub dst: Address,
    #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
    pub payload: Vec<u8>,
    pub msg_seq: u64,
}

impl Envelope {
    pub fn check_payload(payload: &[u8]) -> Result<(), AddressError> {
        if payload.len() > MAX_PAYLOAD_LEN {
            Err(AddressError::PayloadTooLarge(payload.len()))
        } else {
            Ok(())
        }
    }
}

pub fn ser_b64<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
}

pub fn de_b64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    base64::engine::general_purpose::STANDARD.decode(s).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownReason {
    Exit,
    Killed,
    Noproc,
    Nodedown,
}

/// Control notification delivered to a monitor when its target ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownNotice {
    pub npid: Npid,
    pub node: NodeId,
    pub reason: DownReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_signal: Option<i32>,
}

impl DownNotice {
    pub fn from_exit(npid: Npid, outcome: ExitOutcome) -> Self {
        match outcome {
            ExitOutcome::Status(c) => Self {
                npid,
                node: npid.node,
                reason: DownReason::Exit,
                exit_status: Some(c),
                exit_signal: None,
            },
            ExitOutcome::Signal(s) => Self {
                npid,
                node: npid.node,
                reason: DownReason::Killed,
                exit_status: None,
                exit_signal: Some(s),
            },
        }
    }

    pub fn without_process(npid: Npid, reason: DownReason) -> Self {
        Self { npid, node: npid.node, reason, exit_status: None, exit_signal: None }
    }
}

impl fmt::Display for DownNotice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.exit_signal, self.exit_status) {
            (Some(sig), _) => write!(f, "down {} signal {sig}", self.npid),
            (None, Some(code)) => write!(f, "down {} exit {code}", self.npid),
            _ => {
                let r = match self.reason {
                    DownReason::Noproc => "noproc",
                    DownReason::Nodedown => "nodedown",
                    DownReason::Exit => "exit",
                    DownReason::Killed => "killed",
                };
                write!(f, "down {} {r}", self.npid)
            }
        }
    }
}

/// Anything that can sit in a mailbox: user envelopes and control messages
/// share one queue, in arrival order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t")]
pub enum MailItem {
    #[serde(rename = "msg")]
    Msg(Envelope),
    #[serde(rename = "down")]
    Down(DownNotice),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_rules() {
        assert!(validate_name("webserver").is_ok());
        assert!(validate_name("a.b_c-9").is_ok());
        assert!(validate_name("").is_err());
        assert!(validate_name("Web").is_err());
        assert!(validate_name(&"x".repeat(129)).is_err());
        assert_eq!(NameKey::Service(0).validate(), Err(AddressError::ZeroServiceId));
    }

    #[test]
    fn envelope_payload_is_base64() {
        let npid: Npid = "1.1.1".parse().unwrap();
        let env = Envelope { src: npid, dst: Address::Npid { npid }, payload: b"GET".to_vec(), msg_seq: 1 };
        let v = serde_json::to_value(MailItem::Msg(env.clone())).unwrap();
        assert_eq!(v["t"], "msg");
        assert_eq!(v["payload"], "R0VU");
        let back: MailItem = serde_json::from_value(v).unwrap();
        assert_eq!(back, MailItem::Msg(env));
    }

    #[test]
    fn down_rendering() {
        let npid: Npid = "3.1.42".parse().unwrap();
        assert_eq!(DownNotice::from_exit(npid, ExitOutcome::Signal(9)).to_string(), "down 3.1.42 signal 9");
        assert_eq!(DownNotice::from_exit(npid, ExitOutcome::Status(0)).to_string(), "down 3.1.42 exit 0");
        assert_eq!(DownNotice::without_process(npid, DownReason::Noproc).to_string(), "down 3.1.42 noproc");
    }
}
