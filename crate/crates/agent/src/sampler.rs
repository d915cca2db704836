//! Periodic utilization sampling feeding the placement scorer.

use std::sync::Arc;
use std::time::Duration;

use nefele_core::stats::UtilEstimator;
use tracing::warn;

use crate::config::SamplerMode;
use crate::node::{lock, Node};

/// Cumulative (busy, total) jiffies from the first line of /proc/stat.
fn read_cpu_times() -> Option<(u64, u64)> {
    let text = std::fs::read_to_string("/proc/stat").ok()?;
    parse_cpu_line(text.lines().next()?)
}

fn parse_cpu_line(line: &str) -> Option<(u64, u64)> {
    let mut it = line.split_whitespace();
    if it.next()? != "cpu" {
        return None;
    }
    let v: Vec<u64> = it.filter_map(|x| x.parse().ok()).collect();
    if v.len() < 4 {
        return None;
    }
    let total: u64 = v.iter().sum();
    let idle = v[3] + v.get(4).copied().unwrap_or(0);
    Some((total - idle, total))
}

/// CPU utilization between two cumulative readings, in [0, 1].
fn busy_fraction(prev: (u64, u64), now: (u64, u64)) -> Option<f64> {
    let busy = now.0.checked_sub(prev.0)?;
    let total = now.1.checked_sub(prev.1)?;
    (total > 0).then(|| (busy as f64 / total as f64).clamp(0.0, 1.0))
}

impl Node {
    /// Accounting-mode utilization: the allocated share of CPU capacity.
    pub fn accounting_utilization(&self) -> f64 {
        let l = lock(&self.ledger);
        let cap = l.capacity().cpu;
        if cap == 0 {
            0.0
        } else {
            (l.allocated().cpu as f64 / cap as f64).clamp(0.0, 1.0)
        }
    }

    pub async fn run_sampler(self: Arc<Self>) {
        let cfg = self.cfg.sampler.clone();
        let mut est = UtilEstimator::new(cfg.alpha);
        let mut mode = cfg.mode;
        let mut prev = None;
        if mode == SamplerMode::Os {
            prev = read_cpu_times();
            if prev.is_none() {
                warn!("OS utilization probe unavailable; using accounting mode");
                mode = SamplerMode::Accounting;
            }
        }
        let mut tick = tokio::time::interval(Duration::from_millis(cfg.interval_ms));
        let mut shutdown = self.shutdown.subscribe();
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = shutdown.changed() => return,
            }
            let sample = match mode {
                SamplerMode::Accounting => Some(self.accounting_utilization()),
                SamplerMode::Os => {
                    let now = read_cpu_times();
                    let f = prev.zip(now).and_then(|(p, n)| busy_fraction(p, n));
                    if now.is_none() {
                        warn!("OS utilization probe failed; using accounting mode");
                        mode = SamplerMode::Accounting;
                    }
                    prev = now;
                    f
                }
            };
            if let Some(x) = sample {
                est.observe(x);
                lock(&self.ledger).set_utilization(est.ewma(), est.var_ewma());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_proc_stat_line() {
        let (busy, total) = parse_cpu_line("cpu  100 0 50 800 50 0 0 0 0 0").unwrap();
        assert_eq!(total, 1000);
        assert_eq!(busy, 150);
        assert!(parse_cpu_line("intr 1 2 3").is_none());
    }

    #[test]
    fn busy_fraction_between_readings() {
        assert_eq!(busy_fraction((100, 1000), (150, 1100)), Some(0.5));
        assert_eq!(busy_fraction((100, 1000), (100, 1000)), None);
    }
}
