//! Policy parameterisations over raw network outputs: a categorical softmax
//! for discrete actions and a tanh-squashed Gaussian for continuous ones.

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Largest |a| fed to `atanh` when scoring dataset actions.
pub const ACTION_CLIP: f64 = 1.0 - 1e-6;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)`, stable for large |u|.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Draw an index from the categorical with log-probabilities `logp`.
pub fn sample_categorical(logp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Reparameterised draws from the squashed Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianSample {
    pub eps: Array2<f64>,
    pub u: Array2<f64>,
    pub action: Array2<f64>,
    pub log_prob: Vec<f64>,
}

pub fn split_gaussian(out: ArrayView2<f64>) -> (ArrayView2<f64>, ArrayView2<f64>) {
    let d = out.ncols() / 2;
    (out.slice_move(s![.., ..d]), out.slice_move(s![.., d..]))
}

fn gaussian_log_prob(eps: f64, log_std: f64, u: f64) -> f64 {
    -0.5 * eps * eps - log_std - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(u)
}

pub fn sample_gaussian(out: ArrayView2<f64>, rng: &mut impl Rng) -> GaussianSample {
    let (mu, log_std) = split_gaussian(out);
    let (n, d) = mu.dim();
    let eps = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let u = Array2::from_shape_fn((n, d), |(i, j)| mu[[i, j]] + log_std[[i, j]].exp() * eps[[i, j]]);
    let action = u.mapv(f64::tanh);
    let log_prob = (0..n)
        .map(|i| (0..d).map(|j| gaussian_log_prob(eps[[i, j]], log_std[[i, j]], u[[i, j]])).sum())
        .collect();
    GaussianSample { eps, u, action, log_prob }
}

/// Log-density of given squashed actions; returns `(log_prob, u)`.
pub fn gaussian_log_prob_of(out: ArrayView2<f64>, actions: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let (mu, log_std) = split_gaussian(out);
    let u = actions.mapv(|a| a.clamp(-ACTION_CLIP, ACTION_CLIP).atanh());
    let (n, d) = mu.dim();
    let logp = (0..n)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let eps = (u[[i, j]] - mu[[i, j]]) / log_std[[i, j]].exp();
                    gaussian_log_prob(eps, log_std[[i, j]], u[[i, j]])
                })
                .sum()
        })
        .collect();
    (logp, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    #[test]
    fn squash_correction_matches_direct_formula() {
        for u in [-3.0, -0.5, 0.0, 0.2, 1.7, 4.0] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-12);
        }
        assert!(log_one_minus_tanh_sq(40.0).is_finite());
    }

    #[test]
    fn sampled_log_prob_matches_rescoring() {
        let out = array![[0.3, -0.2, -1.0, 0.5], [-2.0, 0.0, -5.0, 2.0]];
        let smp = sample_gaussian(out.view(), &mut stream(0, Stream::Sampling));
        let (again, _) = gaussian_log_prob_of(out.view(), smp.action.view());
        for (a, b) in smp.log_prob.iter().zip(&again) {
            assert!(a.is_finite());
            // rescoring goes through atanh, which loses precision near the edges
            assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()), "{a} {b}");
        }
        assert!(smp.action.iter().all(|a| a.abs() <= 1.0));
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let out = array![[0.4, -0.3]];
        let n = 20_000;
        let mut total = 0.0;
        for i in 0..n {
            let a = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
            let (lp, _) = gaussian_log_prob_of(out.view(), array![[a]].view());
            total += lp[0].exp() * 2.0 / n as f64;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let lp = log_softmax(array![[1000.0, 999.0, 0.0], [0.0, 0.0, 0.0]].view());
        for row in lp.rows() {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
