//! Summary statistics and the utilisation estimator.

use serde::{Deserialize, Serialize};

/// Nearest-rank percentile of an ascending slice (`p` in 0..=100).
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

/// Mean, sample standard deviation, and percentiles. `None` for no samples.
pub fn summarize(samples: &[f64]) -> Option<Summary> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = if sorted.len() > 1 {
        sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some(Summary {
        count: sorted.len(),
        mean,
        std: var.sqrt(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        p50: percentile(&sorted, 50.0)?,
        p95: percentile(&sorted, 95.0)?,
        p99: percentile(&sorted, 99.0)?,
    })
}

/// Exponentially weighted mean and variance of utilisation samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilEstimator {
    alpha: f64,
    mean: f64,
    var: f64,
    primed: bool,
}

impl Default for UtilEstimator {
    fn default() -> Self {
        Self::new(0.2)
    }
}

impl UtilEstimator {
    pub fn new(alpha: f64) -> Self {
        Self { alpha: alpha.clamp(f64::MIN_POSITIVE, 1.0), mean: 0.0, var: 0.0, primed: false }
    }

    pub fn observe(&mut self, x: f64) {
        let x = x.clamp(0.0, 1.0);
        if !self.primed {
            self.mean = x;
            self.var = 0.0;
            self.primed = true;
            return;
        }
        let diff = x - self.mean;
        let incr = self.alpha * diff;
        self.mean += incr;
        self.var = (1.0 - self.alpha) * (self.var + diff * incr);
    }

    pub fn ewma(&self) -> f64 {
        self.mean
    }

    pub fn var_ewma(&self) -> f64 {
        self.var
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 50.0), Some(50.0));
        assert_eq!(percentile(&xs, 95.0), Some(95.0));
        assert_eq!(percentile(&xs, 0.0), Some(1.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn summary_basic() {
        let s = summarize(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((s.mean - 5.0).abs() < 1e-12);
        assert!((s.std - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.p50, 4.0);
    }

    #[test]
    fn constant_stream_variance_stays_zero() {
        let mut e = UtilEstimator::default();
        for _ in 0..50 {
            e.observe(0.5);
            assert_eq!(e.var_ewma(), 0.0);
        }
        assert_eq!(e.ewma(), 0.5);
    }

    #[test]
    fn variance_decays_after_noise() {
        let mut e = UtilEstimator::default();
        for x in [0.1, 0.9, 0.2, 0.8, 0.3, 0.7] {
            e.observe(x);
        }
        let peak = e.var_ewma();
        assert!(peak > 0.01);
        let mut prev = f64::INFINITY;
        let mut seq = Vec::new();
        for _ in 0..60 {
            e.observe(0.5);
            seq.push(e.var_ewma());
        }
        // after a short transient the variance shrinks monotonically toward zero
        for v in &seq[3..] {
            assert!(*v <= prev + 1e-15, "{seq:?}");
            prev = *v;
        }
        assert!(seq.last().unwrap() < &1e-5);
    }
}
