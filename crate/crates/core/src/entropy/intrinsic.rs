use std::f64::consts::PI;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::digamma::digamma;
use super::knn::{euclidean, knn_by, knn_query};
use crate::{Error, Result};

pub const DUPLICATE_FLOOR: f64 = 1e-12;
pub const DEFAULT_KNN: usize = 15;
/// Neighbour counts swept in the k ablation; 0 disables the bonus.
pub const KNN_SWEEP: [usize; 8] = [0, 10, 15, 25, 50, 85, 100, 110];

/// What the state entropy is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// Unconditioned state entropy.
    None,
    /// Policy state value.
    V,
    /// Double-critic minimum at the taken action.
    #[default]
    Q,
}

impl std::str::FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "v" => Ok(Self::V),
            "q" => Ok(Self::Q),
            other => Err(Error::InvalidArgument(format!("unknown condition mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::V => "v",
            Self::Q => "q",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub k: usize,
    pub lambda: f64,
    pub condition_mode: ConditionMode,
    pub duplicate_floor: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { k: DEFAULT_KNN, lambda: 1.0, condition_mode: ConditionMode::Q, duplicate_floor: DUPLICATE_FLOOR }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.duplicate_floor > 0.0) {
            return Err(Error::InvalidArgument("duplicate_floor must be positive".into()));
        }
        Ok(())
    }

    /// k = 0 or lambda = 0 turns the bonus off.
    pub fn enabled(&self) -> bool {
        self.k > 0 && self.lambda > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntrinsicBatch {
    pub rewards: Vec<f64>,
    /// Joint neighbourhood diameter; twice the state distance in `none` mode.
    pub eps: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Per-sample intrinsic reward for a batch of states.
///
/// `none`: `ln max(d_i, floor)` with `d_i` the k-th neighbour state distance.
/// `v`/`q`: `d_i` is the k-th neighbour distance under
/// `max(|s_i - s_j|, |c_i - c_j|)`, `n_i` counts the other points whose
/// condition lies strictly within `d_i`, and the reward is
/// `psi(n_i + 1) / dim + ln(2 max(d_i, floor))`.
pub fn qcse_intrinsic(states: ArrayView2<f64>, conditions: &[f64], config: &EntropyConfig) -> Result<IntrinsicBatch> {
    config.validate()?;
    let n = states.nrows();
    let k = config.k;
    if k == 0 || n <= k {
        return Err(Error::InvalidArgument(format!("batch of {n} is too small for k = {k}")));
    }
    if config.condition_mode == ConditionMode::None {
        let nn = knn_query(states, k)?;
        return Ok(IntrinsicBatch {
            rewards: nn.iter().map(|nb| nb.distance.max(config.duplicate_floor).ln()).collect(),
            eps: nn.iter().map(|nb| 2.0 * nb.distance).collect(),
            counts: vec![0; n],
        });
    }
    if conditions.len() != n {
        return Err(Error::Dimension(format!("{} condition values for {n} states", conditions.len())));
    }
    if conditions.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("condition values".into()));
    }
    let dim = states.ncols() as f64;
    let nn = knn_by(n, k, |i, j| euclidean(states.row(i), states.row(j)).max((conditions[i] - conditions[j]).abs()))?;
    let mut out = IntrinsicBatch { rewards: Vec::with_capacity(n), eps: Vec::with_capacity(n), counts: Vec::with_capacity(n) };
    for (i, nb) in nn.iter().enumerate() {
        let radius = nb.distance;
        let count = (0..n).filter(|&j| j != i && (conditions[i] - conditions[j]).abs() < radius).count();
        let r = digamma(count as f64 + 1.0)? / dim + (2.0 * radius.max(config.duplicate_floor)).ln();
        out.rewards.push(r);
        out.eps.push(2.0 * radius);
        out.counts.push(count);
    }
    Ok(out)
}

/// `lambda * tanh(intrinsic) + reward`, elementwise.
pub fn modify_rewards(rewards: &[f64], intrinsic: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != intrinsic.len() {
        return Err(Error::Dimension(format!("{} rewards, {} intrinsic values", rewards.len(), intrinsic.len())));
    }
    Ok(rewards.iter().zip(intrinsic).map(|(r, b)| lambda * b.tanh() + r).collect())
}

/// Monitoring proxy: the mean log k-th neighbour distance.
pub fn buffer_entropy_estimate(states: ArrayView2<f64>, k: usize) -> Result<f64> {
    if states.nrows() <= k {
        return Err(Error::InvalidArgument(format!("{} samples is too few for k = {k}", states.nrows())));
    }
    let nn = knn_query(states, k)?;
    Ok(nn.iter().map(|nb| nb.distance.max(DUPLICATE_FLOOR).ln()).sum::<f64>() / nn.len() as f64)
}

/// Log volume of the unit Euclidean ball in `d` dimensions.
fn log_unit_ball(d: usize) -> f64 {
    let mut v = if d % 2 == 0 { 1.0 } else { 2.0 };
    let mut m = if d % 2 == 0 { 0 } else { 1 };
    while m < d {
        m += 2;
        v *= 2.0 * PI / m as f64;
    }
    v.ln()
}

/// Kozachenko-Leonenko differential entropy estimate in nats:
/// `psi(N) - psi(k) + ln V_d + (d/N) sum ln r_i`.
pub fn kozachenko_leonenko(states: ArrayView2<f64>, k: usize) -> Result<f64> {
    let n = states.nrows();
    let d = states.ncols();
    let mean_log = buffer_entropy_estimate(states, k)?;
    Ok(digamma(n as f64)? - digamma(k as f64)? + log_unit_ball(d) + d as f64 * mean_log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn q_mode(k: usize) -> EntropyConfig {
        EntropyConfig { k, lambda: 1.0, condition_mode: ConditionMode::Q, duplicate_floor: DUPLICATE_FLOOR }
    }

    #[test]
    fn unit_ball_volumes() {
        assert!((log_unit_ball(1) - 2f64.ln()).abs() < 1e-15);
        assert!((log_unit_ball(2) - PI.ln()).abs() < 1e-15);
        assert!((log_unit_ball(3) - (4.0 * PI / 3.0).ln()).abs() < 1e-14);
        assert!((log_unit_ball(4) - (PI * PI / 2.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn three_point_example_by_hand() {
        let s = array![[0.0], [1.0], [3.0]];
        let out = qcse_intrinsic(s.view(), &[0.0; 3], &q_mode(1)).unwrap();
        let psi3 = 1.5 - 0.5772156649015329;
        assert_eq!(out.counts, vec![2, 2, 2]);
        for (r, d) in out.rewards.iter().zip([1.0f64, 1.0, 2.0]) {
            assert!((r - (psi3 + (2.0 * d).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_states_give_equal_rewards() {
        let s = Array2::from_elem((6, 2), 0.3);
        for mode in [ConditionMode::None, ConditionMode::Q] {
            let cfg = EntropyConfig { k: 2, condition_mode: mode, ..q_mode(2) };
            let out = qcse_intrinsic(s.view(), &[0.0; 6], &cfg).unwrap();
            assert!(out.rewards.iter().all(|r| r.is_finite() && *r == out.rewards[0]));
        }
    }

    #[test]
    fn modify_examples() {
        assert_eq!(modify_rewards(&[1.0], &[0.0], 1.0).unwrap(), vec![1.0]);
        let big = modify_rewards(&[0.3], &[1e6], 2.0).unwrap()[0];
        assert!((big - 2.3).abs() < 1e-12);
        let mid = modify_rewards(&[0.0], &[0.5], 2.0).unwrap()[0];
        assert!((mid - 0.9242).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = array![[0.0], [1.0], [3.0]];
        assert!(qcse_intrinsic(s.view(), &[0.0; 3], &q_mode(3)).is_err());
        assert!(qcse_intrinsic(s.view(), &[0.0, f64::NAN, 1.0], &q_mode(1)).is_err());
        assert!(qcse_intrinsic(s.view(), &[0.0; 2], &q_mode(1)).is_err());
        assert!("w".parse::<ConditionMode>().is_err());
        assert_eq!("V".parse::<ConditionMode>().unwrap(), ConditionMode::V);
    }
}
