//! Synthetic request traces: Poisson arrivals with normally distributed
//! request sizes, durations, and demands.
//!
//! Generation is fixed to Xoshiro256++ seeded via `seed_from_u64`, uniform
//! doubles from the top 53 bits, inverse-CDF exponential gaps, and the cosine
//! branch of Box-Muller for normals, so a (spec, seed) pair yields the same
//! trace on every platform.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normal {
    pub mean: f64,
    #[serde(default)]
    pub std: f64,
}

impl Normal {
    pub const fn fixed(mean: f64) -> Self {
        Self { mean, std: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionMode {
    Single,
    RoundRobin,
}

fn default_admission() -> AdmissionMode {
    AdmissionMode::Single
}

fn default_admission_node() -> u32 {
    1
}

fn default_executable() -> String {
    "/bin/sleep".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub duration_s: f64,
    /// Mean arrivals per second.
    pub arrival_rate: f64,
    pub tasks_per_request: Normal,
    pub task_duration_s: Normal,
    pub task_cpu_mc: Normal,
    pub task_mem_bytes: Normal,
    #[serde(default = "default_admission")]
    pub admission: AdmissionMode,
    #[serde(default = "default_admission_node")]
    pub admission_node: u32,
    /// Fraction of every node's CPU pre-allocated before the run.
    #[serde(default)]
    pub background_load: f64,
    #[serde(default = "default_executable")]
    pub executable: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("{0} standard deviation must be non-negative")]
    NegativeStd(&'static str),
    #[error("background load {0} is outside [0, 1]")]
    BackgroundOutOfRange(f64),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let positive = |v: f64, what| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(WorkloadError::NotPositive(what)) };
        positive(self.duration_s, "duration_s")?;
        positive(self.arrival_rate, "arrival_rate")?;
        positive(self.task_duration_s.mean, "task_duration_s.mean")?;
        positive(self.task_cpu_mc.mean.max(self.task_mem_bytes.mean), "task demand")?;
        for (n, what) in [
            (self.tasks_per_request, "tasks_per_request"),
            (self.task_duration_s, "task_duration_s"),
            (self.task_cpu_mc, "task_cpu_mc"),
            (self.task_mem_bytes, "task_mem_bytes"),
        ] {
            if !(n.std >= 0.0) {
                return Err(WorkloadError::NegativeStd(what));
            }
        }
        if !(0.0..=1.0).contains(&self.background_load) {
            return Err(WorkloadError::BackgroundOutOfRange(self.background_load));
        }
        Ok(())
    }
}

/// One request of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    /// Submission offset from the start of the run, in seconds.
    pub at_s: f64,
    pub tasks: u32,
    pub duration_s: f64,
    pub cpu_mc: u64,
    pub mem_bytes: u64,
}

struct Sampler {
    rng: Xoshiro256PlusPlus,
}

impl Sampler {
    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }

    fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn normal(&mut self, n: Normal) -> f64 {
        n.mean + n.std * self.standard_normal()
    }

    // Rejection-samples the positive part; falls back to the mean magnitude.
    fn positive(&mut self, n: Normal, floor: f64) -> f64 {
        for _ in 0..64 {
            let x = self.normal(n);
            if x > floor {
                return x;
            }
        }
        n.mean.abs().max(floor.max(0.0) + f64::EPSILON)
    }
}

/// Generates the request trace for `spec`.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<TraceEntry>, WorkloadError> {
    spec.validate()?;
    let mut s = Sampler { rng: Xoshiro256PlusPlus::seed_from_u64(spec.seed) };
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += s.exponential(spec.arrival_rate);
        if t >= spec.duration_s {
            break;
        }
        let tasks = s.normal(spec.tasks_per_request).round().max(1.0) as u32;
        let duration_s = s.positive(spec.task_duration_s, 0.0);
        let cpu_mc = if spec.task_cpu_mc.mean > 0.0 { s.positive(spec.task_cpu_mc, 0.5).round() as u64 } else { 0 };
        let mem_bytes =
            if spec.task_mem_bytes.mean > 0.0 { s.positive(spec.task_mem_bytes, 0.5).round() as u64 } else { 0 };
        out.push(TraceEntry { index: out.len(), at_s: t, tasks, duration_s, cpu_mc, mem_bytes });
    }
    Ok(out)
}

/// Canonical text rendering of a trace (one CSV line per request).
pub fn trace_bytes(trace: &[TraceEntry]) -> Vec<u8> {
    let mut s = String::from("index,at_s,tasks,duration_s,cpu_mc,mem_bytes\n");
    for e in trace {
        let _ = writeln!(s, "{},{:?},{},{:?},{},{}", e.index, e.at_s, e.tasks, e.duration_s, e.cpu_mc, e.mem_bytes);
    }
    s.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            seed,
            duration_s: 60.0,
            arrival_rate: 10.0,
            tasks_per_request: Normal { mean: 2.0, std: 1.0 },
            task_duration_s: Normal { mean: 1.0, std: 0.2 },
            task_cpu_mc: Normal { mean: 1000.0, std: 200.0 },
            task_mem_bytes: Normal { mean: 1e6, std: 1e5 },
            admission: AdmissionMode::Single,
            admission_node: 1,
            background_load: 0.0,
            executable: default_executable(),
        }
    }

    #[test]
    fn count_near_rate_times_duration() {
        let n = generate(&spec(7)).unwrap().len() as f64;
        assert!((n - 600.0).abs() <= 5.0 * 600f64.sqrt(), "{n}");
    }

    #[test]
    fn zero_variance_task_count() {
        let mut s = spec(1);
        s.tasks_per_request = Normal::fixed(2.0);
        assert!(generate(&s).unwrap().iter().all(|e| e.tasks == 2));
    }

    #[test]
    fn truncation_keeps_values_positive() {
        let mut s = spec(3);
        s.task_duration_s = Normal { mean: 0.1, std: 5.0 };
        s.tasks_per_request = Normal { mean: 0.0, std: 3.0 };
        for e in generate(&s).unwrap() {
            assert!(e.duration_s > 0.0);
            assert!(e.tasks >= 1);
            assert!(e.cpu_mc >= 1);
        }
    }

    #[test]
    fn validation() {
        let mut s = spec(1);
        s.arrival_rate = 0.0;
        assert_eq!(s.validate(), Err(WorkloadError::NotPositive("arrival_rate")));
        let mut s = spec(1);
        s.background_load = 1.5;
        assert!(matches!(s.validate(), Err(WorkloadError::BackgroundOutOfRange(_))));
    }

    #[test]
    fn toml_shape() {
        let s = spec(9);
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["admission"], "single");
    }
}
