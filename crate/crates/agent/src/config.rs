//! Agent configuration. Every key is optional in the TOML file; defaults are
//! listed in `nefele.example.toml` at the repository root.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nefele_core::membership::SwimConfig;
use nefele_core::placement::ScoreWeights;
use nefele_core::ResourceVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub node_id: u32,
    pub gossip_addr: SocketAddr,
    pub peer_addr: SocketAddr,
    pub http_addr: SocketAddr,
    /// Defaults to `<data_dir>/nefele.sock`.
    pub control_socket: Option<PathBuf>,
    pub data_dir: PathBuf,
    /// Gossip addresses of nodes to join through.
    pub seeds: Vec<String>,
    /// Overrides the detected host capacity.
    pub capacity: Option<CapacityConfig>,
    pub swim: SwimSection,
    pub placement: PlacementSection,
    pub sampler: SamplerSection,
    /// Artificial one-way delay added to every inter-node frame, to emulate a
    /// real network when all agents share one host. Zero disables it.
    pub emulated_link_delay_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    pub cpu_mc: u64,
    pub mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwimSection {
    pub protocol_period_ms: u64,
    pub indirect_probes: usize,
    pub suspect_timeout_ms: u64,
    pub piggyback_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSection {
    pub gather_window_ms: u64,
    pub reservation_ttl_ms: u64,
    pub admission_workers: usize,
    pub stranding_weight: f64,
    pub oversubscription_weight: f64,
    /// How long a deploy waits for handshaking tasks to come up.
    pub handshake_timeout_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Accounting,
    Os,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub interval_ms: u64,
    pub mode: SamplerMode,
    pub alpha: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            node_id: 1,
            gossip_addr: "127.0.0.1:7946".parse().expect("literal"),
            peer_addr: "127.0.0.1:7947".parse().expect("literal"),
            http_addr: "127.0.0.1:7948".parse().expect("literal"),
            control_socket: None,
            data_dir: PathBuf::from("nefele-data"),
            seeds: Vec::new(),
            capacity: None,
            swim: SwimSection::default(),
            placement: PlacementSection::default(),
            sampler: SamplerSection::default(),
            emulated_link_delay_ms: 0,
        }
    }
}

impl Default for SwimSection {
    fn default() -> Self {
        let d = SwimConfig::default();
        Self {
            protocol_period_ms: d.protocol_period.as_millis() as u64,
            indirect_probes: d.indirect_probes,
            suspect_timeout_ms: d.suspect_timeout.as_millis() as u64,
            piggyback_limit: d.piggyback_limit,
        }
    }
}

impl Default for PlacementSection {
    fn default() -> Self {
        let w = ScoreWeights::default();
        Self {
            gather_window_ms: 100,
            reservation_ttl_ms: 2000,
            admission_workers: 8,
            stranding_weight: w.stranding,
            oversubscription_weight: w.oversubscription,
            handshake_timeout_ms: 10_000,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { interval_ms: 1000, mode: SamplerMode::Accounting, alpha: 0.2 }
    }
}

impl SwimSection {
    pub fn to_swim(&self) -> SwimConfig {
        SwimConfig {
            protocol_period: Duration::from_millis(self.protocol_period_ms),
            indirect_probes: self.indirect_probes,
            suspect_timeout: Duration::from_millis(self.suspect_timeout_ms),
            piggyback_limit: self.piggyback_limit,
        }
    }
}

impl PlacementSection {
    pub fn weights(&self) -> ScoreWeights {
        ScoreWeights { stranding: self.stranding_weight, oversubscription: self.oversubscription_weight }
    }
}

impl AgentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let cfg: AgentConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.node_id == 0 {
            return Err(ConfigError::Invalid("node_id must be positive".into()));
        }
        if let Some(c) = self.capacity {
            if c.cpu_mc == 0 || c.mem_bytes == 0 {
                return Err(ConfigError::Invalid("capacity components must be positive".into()));
            }
        }
        self.swim.to_swim().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.placement.admission_workers == 0 {
            return Err(ConfigError::Invalid("admission_workers must be positive".into()));
        }
        if self.placement.gather_window_ms == 0 || self.placement.reservation_ttl_ms == 0 {
            return Err(ConfigError::Invalid("placement windows must be positive".into()));
        }
        if !(self.sampler.alpha > 0.0 && self.sampler.alpha <= 1.0) || self.sampler.interval_ms == 0 {
            return Err(ConfigError::Invalid("sampler alpha must be in (0, 1] and interval positive".into()));
        }
        Ok(())
    }

    pub fn socket_path(&self) -> PathBuf {
        self.control_socket.clone().unwrap_or_else(|| self.data_dir.join("nefele.sock"))
    }

    /// The configured capacity, or the host's CPU count and memory.
    pub fn effective_capacity(&self) -> ResourceVector {
        match self.capacity {
            Some(c) => ResourceVector::new(c.cpu_mc, c.mem_bytes),
            None => host_capacity(),
        }
    }
}

pub fn host_capacity() -> ResourceVector {
    let cpus = std::thread::available_parallelism().map(|n| n.get() as u64).unwrap_or(1);
    let mem = std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("MemTotal:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map(|kb| kb * 1024)
        .unwrap_or(1 << 30);
    ResourceVector::new(cpus * 1000, mem)
}
