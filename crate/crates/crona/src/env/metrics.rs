//! Episode metrics and their aggregation with bootstrap confidence
//! intervals.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub steps: usize,
    pub timeout: bool,
    /// Mean over agents of final geodesic distance to the nearest
    /// target, meters.
    pub dist: f64,
    /// Count of targets found (mean found-count when aggregated).
    pub detect: f64,
}

/// Mean with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, level: f64, seed: u64) -> Aggregate {
    assert!(!xs.is_empty(), "no samples to aggregate");
    assert!((0.0..1.0).contains(&(1.0 - level)), "level must be in (0, 1)");
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() == 1 {
        return Aggregate { mean, ci_lo: mean, ci_hi: mean };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..xs.len() {
            s += xs[rng.gen_range(0..xs.len())];
        }
        means.push(s / xs.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Aggregate { mean, ci_lo: quantile(&means, alpha), ci_hi: quantile(&means, 1.0 - alpha) }
}

/// Nearest-rank quantile on a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub episodes: usize,
    /// Success rate in [0, 1].
    pub succ: Aggregate,
    pub dist: Aggregate,
    pub detect: Aggregate,
    pub steps: Aggregate,
    /// Timeout rate in [0, 1].
    pub timeout: Aggregate,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.90;

impl MetricSummary {
    pub fn from_episodes(eps: &[EpisodeMetrics], seed: u64) -> MetricSummary {
        let col = |f: &dyn Fn(&EpisodeMetrics) -> f64| -> Vec<f64> { eps.iter().map(f).collect() };
        let agg = |xs: &[f64], salt: u64| {
            bootstrap_mean_ci(xs, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, seed ^ salt)
        };
        MetricSummary {
            episodes: eps.len(),
            succ: agg(&col(&|e| e.success as u8 as f64), 1),
            dist: agg(&col(&|e| e.dist), 2),
            detect: agg(&col(&|e| e.detect), 3),
            steps: agg(&col(&|e| e.steps as f64), 4),
            timeout: agg(&col(&|e| e.timeout as u8 as f64), 5),
        }
    }
}
