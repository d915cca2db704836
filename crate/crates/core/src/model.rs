//! Shared domain types: node and process identities, resource vectors, task
//! specifications, and process records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use uuid::Uuid;

/// Largest value an NPID sequence number may take (48 bits).
pub const MAX_SEQ: u64 = (1 << 48) - 1;

/// One gibibyte, in bytes.
pub const GIB: u64 = 1 << 30;

/// Logical node identity: a configured node number plus the agent incarnation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub id: u32,
    #[serde(rename = "inc")]
    pub incarnation: u32,
}

impl NodeId {
    pub const fn new(id: u32, incarnation: u32) -> Self {
        Self { id, incarnation }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.id, self.incarnation)
    }
}

/// Cluster-wide process identity. Canonical text form is `<node>.<incarnation>.<seq>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Npid {
    pub node: NodeId,
    seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NpidError {
    #[error("malformed NPID {0:?}")]
    MalformedNpid(String),
    #[error("NPID sequence {0} exceeds 48 bits")]
    SeqOverflow(u64),
}

impl Npid {
    pub fn new(node: NodeId, seq: u64) -> Result<Self, NpidError> {
        if seq > MAX_SEQ {
            return Err(NpidError::SeqOverflow(seq));
        }
        Ok(Self { node, seq })
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }
}

pub fn format_npid(npid: &Npid) -> String {
    npid.to_string()
}

pub fn parse_npid(s: &str) -> Result<Npid, NpidError> {
    s.parse()
}

impl fmt::Display for Npid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.node.id, self.node.incarnation, self.seq)
    }
}

// Canonical decimal only: no sign, no leading zeros (except "0"), no whitespace.
fn canonical_decimal(part: &str) -> Option<u64> {
    if part.is_empty() || part.len() > 20 || !part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if part.len() > 1 && part.starts_with('0') {
        return None;
    }
    part.parse().ok()
}

impl FromStr for Npid {
    type Err = NpidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || NpidError::MalformedNpid(s.to_string());
        let mut parts = s.split('.');
        let (Some(a), Some(b), Some(c), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(malformed());
        };
        let id = canonical_decimal(a).and_then(|v| u32::try_from(v).ok()).ok_or_else(malformed)?;
        let inc = canonical_decimal(b).and_then(|v| u32::try_from(v).ok()).ok_or_else(malformed)?;
        let seq = canonical_decimal(c).filter(|v| *v <= MAX_SEQ).ok_or_else(malformed)?;
        Ok(Npid { node: NodeId::new(id, inc), seq })
    }
}

impl Serialize for Npid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Npid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// CPU in millicores (1000 = one core) and memory in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceVector {
    pub cpu: u64,
    pub mem: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector { cpu: 0, mem: 0 };

    pub const fn new(cpu: u64, mem: u64) -> Self {
        Self { cpu, mem }
    }

    pub fn is_zero(&self) -> bool {
        self.cpu == 0 && self.mem == 0
    }

    /// Componentwise `self <= other`.
    pub fn le(&self, other: &ResourceVector) -> bool {
        self.cpu <= other.cpu && self.mem <= other.mem
    }

    pub fn saturating_sub(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector::new(self.cpu.saturating_sub(other.cpu), self.mem.saturating_sub(other.mem))
    }

    pub fn checked_mul(&self, k: u64) -> Option<ResourceVector> {
        Some(ResourceVector::new(self.cpu.checked_mul(k)?, self.mem.checked_mul(k)?))
    }

    pub fn scale(&self, k: u64) -> ResourceVector {
        ResourceVector::new(self.cpu.saturating_mul(k), self.mem.saturating_mul(k))
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;
    fn add(self, rhs: Self) -> Self {
        ResourceVector::new(self.cpu.saturating_add(rhs.cpu), self.mem.saturating_add(rhs.mem))
    }
}

impl Sub for ResourceVector {
    type Output = ResourceVector;
    fn sub(self, rhs: Self) -> Self {
        self.saturating_sub(&rhs)
    }
}

impl std::iter::Sum for ResourceVector {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, Add::add)
    }
}

/// Feasibility test: true iff `req <= free` componentwise.
pub fn fits(req: &ResourceVector, free: &ResourceVector) -> bool {
    req.le(free)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("resource demand is zero in every dimension")]
    ZeroDemand,
}

/// Largest `k` with `k * req <= free` componentwise. Dimensions where `req`
/// is zero do not constrain the count.
pub fn max_fit_count(req: &ResourceVector, free: &ResourceVector) -> Result<u64, ResourceError> {
    let per_dim = |need: u64, have: u64| (need > 0).then(|| have / need);
    [per_dim(req.cpu, free.cpu), per_dim(req.mem, free.mem)]
        .into_iter()
        .flatten()
        .min()
        .ok_or(ResourceError::ZeroDemand)
}

/// One task of a spawn request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub executable: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    pub resources: ResourceVector,
    /// Service name registered on the task's behalf once it is running.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anti_affinity_group: Option<String>,
    /// SDK-linked binaries complete a socket handshake before counting as
    /// running; unmodified binaries are running as soon as they are spawned.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub await_handshake: bool,
}

impl TaskSpec {
    pub fn new(executable: impl Into<String>, resources: ResourceVector) -> Self {
        Self {
            executable: executable.into(),
            args: Vec::new(),
            env: BTreeMap::new(),
            resources,
            name: None,
            anti_affinity_group: None,
            await_handshake: false,
        }
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.args = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.executable.is_empty() {
            return Err(ValidationError::EmptyExecutable);
        }
        if self.resources.is_zero() {
            return Err(ValidationError::ZeroResources);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpawnKind {
    Spawn,
    Nspawn,
    Cspawn,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("executable path is empty")]
    EmptyExecutable,
    #[error("task demands no resources")]
    ZeroResources,
    #[error("request has no tasks")]
    NoTasks,
    #[error("nspawn tasks must be identical")]
    NonIdenticalTasks,
    #[error("spawn takes exactly one task")]
    NotSingle,
    #[error("tenant is empty")]
    EmptyTenant,
}

/// A gang of tasks submitted for placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnRequest {
    #[serde(default = "Uuid::new_v4")]
    pub request_id: Uuid,
    #[serde(default = "default_tenant")]
    pub tenant: String,
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_kind")]
    pub kind: SpawnKind,
}

pub fn default_tenant() -> String {
    "default".to_string()
}

fn default_kind() -> SpawnKind {
    SpawnKind::Cspawn
}

impl SpawnRequest {
    pub fn new(tenant: impl Into<String>, kind: SpawnKind, tasks: Vec<TaskSpec>) -> Self {
        Self { request_id: Uuid::new_v4(), tenant: tenant.into(), tasks, kind }
    }

    pub fn nspawn(tenant: impl Into<String>, task: TaskSpec, count: usize) -> Self {
        Self::new(tenant, SpawnKind::Nspawn, vec![task; count])
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.tenant.is_empty() {
            return Err(ValidationError::EmptyTenant);
        }
        let first = self.tasks.first().ok_or(ValidationError::NoTasks)?;
        for t in &self.tasks {
            t.validate()?;
        }
        match self.kind {
            SpawnKind::Spawn if self.tasks.len() != 1 => Err(ValidationError::NotSingle),
            SpawnKind::Nspawn if self.tasks.iter().any(|t| t != first) => {
                Err(ValidationError::NonIdenticalTasks)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessState {
    Starting,
    Running,
    Exited,
    Killed,
}

impl ProcessState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, ProcessState::Exited | ProcessState::Killed)
    }
}

impl fmt::Display for ProcessState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProcessState::Starting => "starting",
            ProcessState::Running => "running",
            ProcessState::Exited => "exited",
            ProcessState::Killed => "killed",
        };
        f.write_str(s)
    }
}

/// Lifecycle of one managed process. Timestamps are unix milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub npid: Npid,
    pub tenant: String,
    pub os_pid: Option<u32>,
    pub node: NodeId,
    pub spec: TaskSpec,
    pub state: ProcessState,
    pub exit_status: Option<i32>,
    pub exit_signal: Option<i32>,
    pub started_at: u64,
    pub ended_at: Option<u64>,
    pub monitors: BTreeSet<Npid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("process already terminated")]
    AlreadyTerminal,
}

impl ProcessRecord {
    pub fn new(npid: Npid, tenant: String, spec: TaskSpec, started_at: u64) -> Self {
        Self {
            node: npid.node,
            npid,
            tenant,
            os_pid: None,
            spec,
            state: ProcessState::Starting,
            exit_status: None,
            exit_signal: None,
            started_at,
            ended_at: None,
            monitors: BTreeSet::new(),
        }
    }

    pub fn mark_running(&mut self) -> Result<(), TransitionError> {
        match self.state {
            ProcessState::Starting => {
                self.state = ProcessState::Running;
                Ok(())
            }
            ProcessState::Running => Ok(()),
            _ => Err(TransitionError::AlreadyTerminal),
        }
    }

    /// Moves the record to its terminal state. Exactly one call succeeds.
    pub fn finish(&mut self, exit: ExitOutcome, at: u64) -> Result<(), TransitionError> {
        if self.state.is_terminal() {
            return Err(TransitionError::AlreadyTerminal);
        }
        match exit {
            ExitOutcome::Status(code) => {
                self.state = ProcessState::Exited;
                self.exit_status = Some(code);
            }
            ExitOutcome::Signal(sig) => {
                self.state = ProcessState::Killed;
                self.exit_signal = Some(sig);
            }
        }
        self.ended_at = Some(at);
        Ok(())
    }
}

/// How a process ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitOutcome {
    Status(i32),
    Signal(i32),
}

/// Exit status recorded for a child that could not be executed.
pub const SPAWN_FAILURE_STATUS: i32 = 127;
