//! Frame bodies for the local control socket and the inter-node transport.
//!
//! Requests may carry an `id`; the matching response carries it back as `re`.
//! Responses are correlated by these ids only, never by connection.

use nefele_core::logbuf::LogRecord;
use nefele_core::messaging::{DownNotice, Envelope, GroupMode, NameKey, NameTableEntry, OriginTable};
use nefele_core::placement::{Offer, Rejection};
use nefele_core::{NodeId, Npid, ProcessRecord, ResourceVector, TaskSpec};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use nefele_core::messaging::{de_b64, ser_b64};

/// A request frame: body plus optional correlation id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Req<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub body: T,
}

/// A response frame: body plus the id of the request it answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resp<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re: Option<u64>,
    #[serde(flatten)]
    pub body: T,
}

fn default_signal() -> i32 {
    15
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Local,
    Cluster,
}

/// Message destination as named by a client; tenant-scoped variants take the
/// tenant of the sending session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Dest {
    Npid { npid: Npid },
    Name { name: String },
    Service { id: u32 },
    Topic { topic: String },
    Group { name: String, mode: GroupMode },
}

/// Frames a client sends on the control socket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "kebab-case")]
pub enum CtlRequest {
    /// Handshake of a spawned process, using its injected token.
    Hello {
        token: String,
        #[serde(default)]
        os_pid: Option<u32>,
    },
    /// Gives a tool or external client an ephemeral identity and mailbox for
    /// the lifetime of the connection.
    Attach {
        #[serde(default)]
        tenant: Option<String>,
    },
    Spawn {
        #[serde(default)]
        tenant: Option<String>,
        #[serde(default)]
        request_id: Option<Uuid>,
        task: TaskSpec,
    },
    Nspawn {
        #[serde(default)]
        tenant: Option<String>,
        #[serde(default)]
        request_id: Option<Uuid>,
        task: TaskSpec,
        count: usize,
    },
    Cspawn {
        #[serde(default)]
        tenant: Option<String>,
        #[serde(default)]
        request_id: Option<Uuid>,
        tasks: Vec<TaskSpec>,
    },
    Kill {
        npid: Npid,
        #[serde(default = "default_signal")]
        signal: i32,
    },
    Monitor {
        target: Npid,
    },
    Ps {
        #[serde(default)]
        scope: Scope,
        #[serde(default)]
        tenant: Option<String>,
    },
    Logs {
        npid: Npid,
        #[serde(default)]
        follow: bool,
        #[serde(default)]
        last_n: Option<usize>,
    },
    Send {
        dst: Dest,
        #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
        payload: Vec<u8>,
    },
    Recv {
        #[serde(default)]
        timeout_ms: u64,
    },
    Register {
        key: NameKey,
    },
    Unregister {
        key: NameKey,
    },
    Wait {
        key: NameKey,
        #[serde(default)]
        timeout_ms: u64,
    },
    Subscribe {
        topic: String,
    },
    Unsubscribe {
        topic: String,
    },
    Publish {
        topic: String,
        #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
        payload: Vec<u8>,
    },
    Names {
        #[serde(default)]
        tenant: Option<String>,
    },
    Nodes,
    Request {
        request_id: Uuid,
    },
    Mailbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    BadToken,
    Gone,
    NotAttached,
    AlreadyAttached,
    NoSuchProcess,
    NoRoute,
    Unreachable,
    PayloadTooLarge,
    UnknownRequest,
    Internal,
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorCode::BadRequest => "BadRequest",
            ErrorCode::BadToken => "BadToken",
            ErrorCode::Gone => "Gone",
            ErrorCode::NotAttached => "NotAttached",
            ErrorCode::AlreadyAttached => "AlreadyAttached",
            ErrorCode::NoSuchProcess => "NoSuchProcess",
            ErrorCode::NoRoute => "NoRoute",
            ErrorCode::Unreachable => "Unreachable",
            ErrorCode::PayloadTooLarge => "PayloadTooLarge",
            ErrorCode::UnknownRequest => "UnknownRequest",
            ErrorCode::Internal => "Internal",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestState {
    Pending,
    Placed,
    Rejected,
}

/// Outcome and timings of one spawn request. Timestamps are unix
/// microseconds taken on the admission node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestStatus {
    pub request_id: Uuid,
    pub state: RequestState,
    pub admission_node: u32,
    pub tasks: usize,
    #[serde(default)]
    pub npids: Vec<Npid>,
    #[serde(default)]
    pub os_pids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub submitted_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deployed_us: Option<u64>,
}

impl RequestStatus {
    /// Submission to last process running, in milliseconds.
    pub fn scheduling_ms(&self) -> Option<f64> {
        self.deployed_us.map(|d| d.saturating_sub(self.submitted_us) as f64 / 1000.0)
    }
}

/// One row of the node listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub node: NodeId,
    pub status: nefele_core::membership::Status,
    pub gossip_addr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<ResourceVector>,
    /// Only reported by the node itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocated: Option<ResourceVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reserved: Option<ResourceVector>,
}

/// Frames the agent sends on the control socket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "kebab-case")]
pub enum CtlResponse {
    Ack {
        npid: Npid,
        tenant: String,
    },
    Ok,
    Error {
        code: ErrorCode,
        message: String,
    },
    SpawnResult(RequestStatus),
    PsResult {
        processes: Vec<ProcessRecord>,
        partial: bool,
        #[serde(default)]
        unreachable: Vec<u32>,
    },
    Log(LogRecord),
    LogEnd,
    Msg(Envelope),
    Down(DownNotice),
    Timeout,
    Resolved {
        npid: Npid,
    },
    NamesResult {
        entries: Vec<NameTableEntry>,
    },
    NodesResult {
        nodes: Vec<NodeView>,
    },
    RequestState(RequestStatus),
    MailboxStats {
        queued: usize,
        dropped: u64,
        delivered: u64,
    },
}

impl CtlResponse {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        CtlResponse::Error { code, message: message.into() }
    }
}

/// Result of spawning one task of a deploy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployResult {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub npid: Option<Npid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os_pid: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Inter-node frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "kebab-case")]
pub enum PeerMsg {
    /// First frame on every connection.
    Hello { node: NodeId },
    FeasReq { request_id: Uuid, class: usize, req: ResourceVector, n: u64 },
    Offer { offer: Option<Offer> },
    Commit { request_id: Uuid, reservation_id: Uuid, count: u64 },
    CommitAck { ok: bool },
    Release { reservation_id: Uuid },
    Deploy { request_id: Uuid, tenant: String, reservation_id: Uuid, tasks: Vec<(usize, TaskSpec)> },
    DeployAck { results: Vec<DeployResult> },
    Msg { to: Npid, env: Envelope },
    NameUpdate { table: OriginTable },
    NameAntientropy { table: OriginTable },
    /// The sender's complete set of subscribed (tenant, topic) pairs.
    Sub { topics: Vec<(String, String)> },
    Unsub { tenant: String, topic: String },
    Pub { tenant: String, topic: String, env: Envelope },
    Kill { npid: Npid, signal: i32 },
    KillAck {
        #[serde(default)]
        error: Option<ErrorCode>,
    },
    Monitor { watcher: Npid, target: Npid },
    Down { watcher: Npid, notice: DownNotice },
    Ps {
        #[serde(default)]
        tenant: Option<String>,
    },
    PsResult { processes: Vec<ProcessRecord> },
    Logs {
        npid: Npid,
        follow: bool,
        #[serde(default)]
        last_n: Option<usize>,
    },
    Log { record: LogRecord },
    LogEnd,
}

/// Inter-node frame envelope. `id` marks a request expecting replies, `re`
/// marks a reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerFrame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re: Option<u64>,
    #[serde(flatten)]
    pub body: PeerMsg,
}

#[cfg(test)]
mod tests {
    use super::*;
    use nefele_core::frame;

    #[test]
    fn request_with_id_round_trips() {
        let req = Req { id: Some(7), body: CtlRequest::Recv { timeout_ms: 10 } };
        let bytes = frame::encode(&req).unwrap();
        let body = &bytes[4..];
        assert_eq!(std::str::from_utf8(body).unwrap(), r#"{"id":7,"t":"recv","timeout_ms":10}"#);
        let back: Req<CtlRequest> = frame::decode_body(body).unwrap();
        assert_eq!(back.id, Some(7));
        assert_eq!(back.body, CtlRequest::Recv { timeout_ms: 10 });
    }

    #[test]
    fn hello_and_ack_shapes() {
        let hello: Req<CtlRequest> = frame::decode_body(br#"{"t":"hello","token":"ab","os_pid":42}"#).unwrap();
        assert_eq!(hello.body, CtlRequest::Hello { token: "ab".into(), os_pid: Some(42) });
        let ack = Resp { re: None, body: CtlResponse::Ack { npid: "1.1.5".parse().unwrap(), tenant: "default".into() } };
        assert_eq!(serde_json::to_string(&ack).unwrap(), r#"{"t":"ack","npid":"1.1.5","tenant":"default"}"#);
    }

    #[test]
    fn send_payload_is_base64() {
        let r: Req<CtlRequest> =
            frame::decode_body(br#"{"t":"send","dst":{"kind":"name","name":"webserver"},"payload":"R0VU"}"#).unwrap();
        match r.body {
            CtlRequest::Send { dst, payload } => {
                assert_eq!(dst, Dest::Name { name: "webserver".into() });
                assert_eq!(payload, b"GET");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_frame_shape() {
        let e = Resp { re: Some(3), body: CtlResponse::error(ErrorCode::NoRoute, "no registrants") };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"re":3,"t":"error","code":"no_route","message":"no registrants"}"#
        );
    }

    #[test]
    fn kill_defaults_to_sigterm() {
        let r: Req<CtlRequest> = frame::decode_body(br#"{"t":"kill","npid":"2.1.9"}"#).unwrap();
        assert_eq!(r.body, CtlRequest::Kill { npid: "2.1.9".parse().unwrap(), signal: 15 });
    }

    #[test]
    fn peer_frame_round_trip() {
        let f = PeerFrame { id: Some(1), re: None, body: PeerMsg::Kill { npid: "1.2.3".parse().unwrap(), signal: 9 } };
        let bytes = frame::encode(&f).unwrap();
        let back: PeerFrame = frame::decode_body(&bytes[4..]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn unknown_type_rejected() {
        assert!(frame::decode_body::<Req<CtlRequest>>(br#"{"t":"frobnicate"}"#).is_err());
        assert!(frame::decode_body::<Req<CtlRequest>>(br#"{"id":1}"#).is_err());
    }
}
