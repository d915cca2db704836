use std::process::{Command, Stdio};
use std::time::Instant;

use nefele_core::stats::{summarize, Summary};
use nefele_core::{ResourceVector, TaskSpec};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::client::Client;
use crate::proto::RequestState;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    /// Milliseconds from the spawn call to the process running.
    pub ms: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rows: Vec<BaselineRow>,
}

impl BaselineReport {
    pub fn row(&self, method: &str) -> Option<&BaselineRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

impl std::fmt::Display for BaselineReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<24} {:>10} {:>10} {:>10}", "method", "mean ms", "std ms", "p50 ms")?;
        for r in &self.rows {
            writeln!(f, "{:<24} {:>10.3} {:>10.3} {:>10.3}", r.method, r.ms.mean, r.ms.std, r.ms.p50)?;
        }
        Ok(())
    }
}

pub const SHELL: &str = "shell";
pub const LOCAL: &str = "nefele spawn (local)";
pub const REMOTE: &str = "nefele spawn (remote)";

fn sleeper() -> TaskSpec {
    TaskSpec::new("/bin/sleep", ResourceVector::new(100, 1 << 20)).with_args(["600"])
}

fn direct_spawn_ms() -> Result<f64, BenchError> {
    let t0 = Instant::now();
    let mut child = Command::new("/bin/sleep")
        .arg("600")
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| BenchError::Other(format!("direct spawn: {e}")))?;
    let ms = t0.elapsed().as_secs_f64() * 1000.0;
    let _ = child.kill();
    let _ = child.wait();
    Ok(ms)
}

async fn orchestrated_ms(client: &Client, expect_remote_of: Option<u32>) -> Result<f64, BenchError> {
    let t0 = Instant::now();
    let st = client.spawn(sleeper()).await.map_err(|source| BenchError::Agent { node: 0, source })?;
    let ms = t0.elapsed().as_secs_f64() * 1000.0;
    if st.state != RequestState::Placed {
        return Err(BenchError::Other(format!("spawn rejected: {}", st.reason.unwrap_or_default())));
    }
    let npid = st.npids[0];
    let _ = client.kill(npid, 9).await;
    match expect_remote_of {
        Some(admission) if npid.node.id == admission => {
            Err(BenchError::Other(format!("{npid} was placed on the admission node; expected a remote placement")))
        }
        None if npid.node.id != st.admission_node => {
            Err(BenchError::Other(format!("{npid} was placed remotely; expected a local placement")))
        }
        _ => Ok(ms),
    }
}

/// Times `trials` spawns each way: direct fork/exec, through the agent that
/// places locally, and through an agent that must place on another node.
/// `remote` must be an agent with no room for a 100 mc task.
pub async fn measure_spawn_baselines(local: &Client, remote: &Client, remote_node: u32, trials: usize) -> Result<BaselineReport, BenchError> {
    let mut shell = Vec::with_capacity(trials);
    let mut loc = Vec::with_capacity(trials);
    let mut rem = Vec::with_capacity(trials);
    // Warm caches and connections before timing.
    orchestrated_ms(local, None).await?;
    orchestrated_ms(remote, Some(remote_node)).await?;
    for _ in 0..trials {
        shell.push(direct_spawn_ms()?);
        loc.push(orchestrated_ms(local, None).await?);
        rem.push(orchestrated_ms(remote, Some(remote_node)).await?);
    }
    let none = || BenchError::Other("no trials".into());
    Ok(BaselineReport {
        rows: vec![
            BaselineRow { method: SHELL.into(), ms: summarize(&shell).ok_or_else(none)? },
            BaselineRow { method: LOCAL.into(), ms: summarize(&loc).ok_or_else(none)? },
            BaselineRow { method: REMOTE.into(), ms: summarize(&rem).ok_or_else(none)? },
        ],
    })
}
