use std::time::{Duration, Instant};

use nefele_core::stats::{summarize, Summary};
use nefele_core::{Npid, ResourceVector, TaskSpec};
use nix::sys::signal::{kill, Signal};
use nix::unistd::Pid;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::client::Client;
use crate::proto::{CtlResponse, RequestState};

/// Death-to-DOWN and death-to-replacement latencies, in milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrashReport {
    pub down_ms: Vec<f64>,
    pub respawn_ms: Vec<f64>,
    pub down: Summary,
    pub respawn: Summary,
}

impl std::fmt::Display for CrashReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "trials {}", self.down.count)?;
        writeln!(
            f,
            "death -> DOWN ms: mean {:.3} ± {:.3}  p50 {:.3}  p99 {:.3}  max {:.3}",
            self.down.mean, self.down.std, self.down.p50, self.down.p99, self.down.max
        )?;
        write!(
            f,
            "death -> replacement running ms: mean {:.3} ± {:.3}  p50 {:.3}  p99 {:.3}  max {:.3}",
            self.respawn.mean, self.respawn.std, self.respawn.p50, self.respawn.p99, self.respawn.max
        )
    }
}

async fn spawn_victim(client: &Client) -> Result<(Npid, u32), BenchError> {
    let task = TaskSpec::new("/bin/sleep", ResourceVector::new(10, 1 << 20)).with_args(["600"]);
    let st = client.spawn(task).await.map_err(|source| BenchError::Agent { node: 0, source })?;
    if st.state != RequestState::Placed {
        return Err(BenchError::Other(format!("victim not placed: {}", st.reason.unwrap_or_default())));
    }
    match (st.npids.first(), st.os_pids.first()) {
        (Some(n), Some(p)) => Ok((*n, *p)),
        _ => Err(BenchError::Other("placed without a process".into())),
    }
}

/// Kills a co-located victim `trials` times with SIGKILL and times the DOWN
/// arrival at a watcher session on the same agent. Each DOWN triggers a
/// respawn, which becomes the next trial's victim.
pub async fn measure_crash_latency(client: &Client, trials: usize) -> Result<CrashReport, BenchError> {
    let agent = |source| BenchError::Agent { node: 0, source };
    client.attach(None).await.map_err(agent)?;
    let mut victim = spawn_victim(client).await?;
    let mut down_ms = Vec::with_capacity(trials);
    let mut respawn_ms = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (npid, os_pid) = victim;
        client.monitor(npid).await.map_err(agent)?;
        let t0 = Instant::now();
        kill(Pid::from_raw(os_pid as i32), Signal::SIGKILL).map_err(|e| BenchError::Other(format!("kill {os_pid}: {e}")))?;
        loop {
            match client.recv(Duration::from_secs(10)).await.map_err(agent)? {
                CtlResponse::Down(d) if d.npid == npid => break,
                CtlResponse::Timeout => return Err(BenchError::Other(format!("no DOWN for {npid} within 10 s"))),
                _ => continue,
            }
        }
        down_ms.push(t0.elapsed().as_secs_f64() * 1000.0);
        victim = spawn_victim(client).await?;
        respawn_ms.push(t0.elapsed().as_secs_f64() * 1000.0);
    }
    let _ = client.kill(victim.0, 9).await;
    let none = || BenchError::Other("no trials".into());
    Ok(CrashReport {
        down: summarize(&down_ms).ok_or_else(none)?,
        respawn: summarize(&respawn_ms).ok_or_else(none)?,
        down_ms,
        respawn_ms,
    })
}
