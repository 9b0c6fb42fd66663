use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use super::mdp::{TabularMdp, TabularPolicy};
use crate::{Error, Result};

pub const EVAL_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 1_000_000;
const MAX_IMPROVEMENTS: usize = 10_000;

fn check_shapes(mdp: &TabularMdp, pi: &TabularPolicy, r_int: &Array2<f64>) -> Result<()> {
    let dim = (mdp.n_states(), mdp.n_actions());
    if pi.probs.dim() != dim || r_int.dim() != dim {
        return Err(Error::Dimension(format!(
            "policy {:?} / intrinsic {:?} do not match MDP {dim:?}",
            pi.probs.dim(),
            r_int.dim()
        )));
    }
    if r_int.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("intrinsic rewards".into()));
    }
    Ok(())
}

/// `sum_a pi(a|s) (q(s,a) - ln pi(a|s))`, with `0 ln 0 = 0`.
fn soft_value(pi: &TabularPolicy, q: &Array2<f64>) -> Vec<f64> {
    pi.probs
        .rows()
        .into_iter()
        .zip(q.rows())
        .map(|(p, qs)| p.iter().zip(qs.iter()).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * (v - w.ln())).sum())
        .collect()
}

/// One application of the entropy-augmented evaluation operator.
fn soft_backup(mdp: &TabularMdp, pi: &TabularPolicy, r_int: &Array2<f64>, q: &Array2<f64>) -> Array2<f64> {
    let v = soft_value(pi, q);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    Array2::from_shape_fn((ns, na), |(s, a)| {
        let future: f64 = (0..ns).map(|t| mdp.p[[s, a, t]] * v[t]).sum();
        mdp.r[[s, a]] + r_int[[s, a]] + mdp.gamma * future
    })
}

fn sup_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct SoftEvaluation {
    pub q: Array2<f64>,
    pub sweeps: usize,
}

/// Iterate the soft backup from zero until successive iterates differ by
/// less than `tol` in sup norm.
pub fn soft_policy_evaluation(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    r_int: &Array2<f64>,
    tol: f64,
) -> Result<SoftEvaluation> {
    check_shapes(mdp, pi, r_int)?;
    let mut q = Array2::zeros(mdp.r.dim());
    for sweep in 1..=MAX_SWEEPS {
        let next = soft_backup(mdp, pi, r_int, &q);
        let delta = sup_dist(&next, &q);
        q = next;
        if !delta.is_finite() {
            return Err(Error::NonFinite("soft evaluation diverged".into()));
        }
        if delta < tol {
            return Ok(SoftEvaluation { q, sweeps: sweep });
        }
    }
    Err(Error::IterationCap(MAX_SWEEPS))
}

/// Soft Q-function of `pi` from the linear system
/// `(I - gamma P_pi) q = r + r_int - gamma P H_pi`.
pub fn soft_q_exact(mdp: &TabularMdp, pi: &TabularPolicy, r_int: &Array2<f64>) -> Result<Array2<f64>> {
    check_shapes(mdp, pi, r_int)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = ns * na;
    let neg_entropy: Vec<f64> = soft_value(pi, &Array2::zeros((ns, na)));
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut c = DVector::<f64>::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            c[row] = mdp.r[[s, a]] + r_int[[s, a]];
            for t in 0..ns {
                let pt = mdp.p[[s, a, t]];
                if pt == 0.0 {
                    continue;
                }
                c[row] += mdp.gamma * pt * neg_entropy[t];
                for b in 0..na {
                    m[(row, t * na + b)] -= mdp.gamma * pt * pi.probs[[t, b]];
                }
            }
        }
    }
    let x = m.lu().solve(&c).ok_or_else(|| Error::InvalidArgument("singular evaluation system".into()))?;
    Ok(Array2::from_shape_fn((ns, na), |(s, a)| x[s * na + a]))
}

/// Largest observed `|Q_{k+1} - Q*| / |Q_k - Q*|` along soft evaluation from
/// zero, measured while the error is above `floor`.
pub fn contraction_ratio(mdp: &TabularMdp, pi: &TabularPolicy, r_int: &Array2<f64>, floor: f64) -> Result<f64> {
    let q_star = soft_q_exact(mdp, pi, r_int)?;
    let mut q = Array2::zeros(mdp.r.dim());
    let mut err = sup_dist(&q, &q_star);
    let mut worst: f64 = 0.0;
    let mut sweeps = 0;
    while err > floor {
        q = soft_backup(mdp, pi, r_int, &q);
        let next = sup_dist(&q, &q_star);
        worst = worst.max(next / err);
        err = next;
        sweeps += 1;
        if sweeps > MAX_SWEEPS {
            return Err(Error::IterationCap(MAX_SWEEPS));
        }
    }
    Ok(worst)
}

/// Row-wise softmax of `q`.
pub fn soft_policy_improvement(q: &Array2<f64>) -> TabularPolicy {
    let mut probs = q.clone();
    for mut row in probs.rows_mut() {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - top).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    TabularPolicy { probs }
}

#[derive(Debug, Clone)]
pub struct PolicyIteration {
    pub policy: TabularPolicy,
    /// Soft Q of every policy visited, starting with the initial one.
    pub q_trace: Vec<Array2<f64>>,
}

impl PolicyIteration {
    /// Smallest elementwise step `Q_{k+1} - Q_k` along the trace.
    pub fn min_improvement(&self) -> f64 {
        self.q_trace
            .windows(2)
            .flat_map(|w| w[1].iter().zip(w[0].iter()).map(|(b, a)| b - a).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn q(&self) -> &Array2<f64> {
        self.q_trace.last().expect("trace is never empty")
    }
}

/// Soft policy iteration from the uniform policy with exact evaluation.
pub fn soft_policy_iteration(mdp: &TabularMdp, r_int: &Array2<f64>, tol: f64) -> Result<PolicyIteration> {
    let init = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    soft_policy_iteration_with(mdp, r_int, init, tol, soft_policy_improvement)
}

/// Policy iteration with a caller-supplied improvement step; stops when the
/// policy moves by less than `tol`.
pub fn soft_policy_iteration_with(
    mdp: &TabularMdp,
    r_int: &Array2<f64>,
    init: TabularPolicy,
    tol: f64,
    improve: impl Fn(&Array2<f64>) -> TabularPolicy,
) -> Result<PolicyIteration> {
    let mut policy = init;
    let mut q_trace = vec![soft_q_exact(mdp, &policy, r_int)?];
    for _ in 0..MAX_IMPROVEMENTS {
        let next = improve(q_trace.last().unwrap());
        let change = next.max_abs_diff(&policy);
        policy = next;
        q_trace.push(soft_q_exact(mdp, &policy, r_int)?);
        if change < tol {
            return Ok(PolicyIteration { policy, q_trace });
        }
    }
    Err(Error::IterationCap(MAX_IMPROVEMENTS))
}
