use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::entropy::{qcse_intrinsic, ConditionMode, EntropyConfig};
use crate::rng::{stream, Stream};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem2Config {
    pub pairs: usize,
    pub batch: usize,
    pub state_dim: usize,
    pub k: usize,
    /// Standard deviation of the Gaussian gap between the two critics.
    pub noise: f64,
    pub seed: u64,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Self { pairs: 1000, batch: 64, state_dim: 2, k: 5, noise: 0.3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem2Report {
    pub pairs: usize,
    /// Mean over pairs of `mean r(. | min(Q1, Q2)) - mean r(. | Q1)`.
    pub mean_difference: f64,
    /// Fraction of pairs whose batch-mean reward under the minimum exceeds the
    /// one under `Q1` alone.
    pub violation_fraction: f64,
    /// Same comparison per sample.
    pub per_sample_violation_fraction: f64,
    /// Largest deviation when `Q2 = Q1`; must be exactly 0.
    pub identical_max_abs_diff: f64,
    /// Largest deviation when `Q2 = Q1 + c` with `c > 0`; must be exactly 0.
    pub shifted_max_abs_diff: f64,
}

impl Theorem2Report {
    pub fn exact_cases_hold(&self) -> bool {
        self.identical_max_abs_diff == 0.0 && self.shifted_max_abs_diff == 0.0
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compare the intrinsic reward conditioned on a double-critic minimum with
/// the one conditioned on a single critic, over random critic pairs.
pub fn theorem2_report(config: &Theorem2Config) -> Result<Theorem2Report> {
    let mut rng = stream(config.seed, Stream::Sampling);
    let ecfg = EntropyConfig { k: config.k, lambda: 1.0, condition_mode: ConditionMode::Q, ..EntropyConfig::default() };
    let mut diff_sum = 0.0;
    let mut violations = 0;
    let mut sample_violations = 0;
    let mut identical: f64 = 0.0;
    let mut shifted: f64 = 0.0;
    for _ in 0..config.pairs {
        let states = Array2::from_shape_fn((config.batch, config.state_dim), |_| rng.random_range(-1.0..1.0));
        // a smooth critic plus per-sample jitter
        let w: Vec<f64> = (0..config.state_dim).map(|_| rng.sample(StandardNormal)).collect();
        let q1: Vec<f64> = states
            .rows()
            .into_iter()
            .map(|s| s.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let q2: Vec<f64> = q1.iter().map(|q| q + config.noise * rng.sample::<f64, _>(StandardNormal)).collect();
        let hat: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect();
        let single = qcse_intrinsic(states.view(), &q1, &ecfg)?.rewards;
        let pair = qcse_intrinsic(states.view(), &hat, &ecfg)?.rewards;
        let m_single = single.iter().sum::<f64>() / single.len() as f64;
        let m_pair = pair.iter().sum::<f64>() / pair.len() as f64;
        diff_sum += m_pair - m_single;
        violations += usize::from(m_pair > m_single);
        sample_violations += pair.iter().zip(&single).filter(|(p, s)| p > s).count();

        let same: Vec<f64> = q1.iter().zip(&q1).map(|(a, b)| a.min(*b)).collect();
        identical = identical.max(max_abs_diff(&qcse_intrinsic(states.view(), &same, &ecfg)?.rewards, &single));
        let c = 0.5 + rng.random_range(0.0..2.0);
        let lifted: Vec<f64> = q1.iter().map(|a| a.min(a + c)).collect();
        shifted = shifted.max(max_abs_diff(&qcse_intrinsic(states.view(), &lifted, &ecfg)?.rewards, &single));
    }
    let n = config.pairs.max(1) as f64;
    Ok(Theorem2Report {
        pairs: config.pairs,
        mean_difference: diff_sum / n,
        violation_fraction: violations as f64 / n,
        per_sample_violation_fraction: sample_violations as f64 / (n * config.batch as f64),
        identical_max_abs_diff: identical,
        shifted_max_abs_diff: shifted,
    })
}
