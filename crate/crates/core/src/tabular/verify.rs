use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::density::{marginal_state_distribution, simplex_sweep, smm_kl, DensityPair, SweepReport};
use super::mdp::{gridworld_mdp, TabularMdp, TabularPolicy};
use super::soft::{
    contraction_ratio, soft_policy_evaluation, soft_policy_improvement, soft_policy_iteration_with, EVAL_TOL,
};
use super::theorem2::{theorem2_report, Theorem2Config, Theorem2Report};
use crate::envs::GridWorldSpec;
use crate::rng::{stream, Stream};
use crate::Result;

/// Deliberate defects used to confirm the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Improvement takes the softmax of `-Q`.
    ReversedImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub mdps: usize,
    pub policies_per_mdp: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub monotone_tol: f64,
    pub dominance_tol: f64,
    pub contraction_slack: f64,
    pub simplex_divisions: usize,
    pub theorem2: Theorem2Config,
    pub smm_seeds: usize,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mdps: 50,
            policies_per_mdp: 100,
            max_states: 10,
            max_actions: 4,
            gamma: 0.9,
            monotone_tol: 1e-9,
            dominance_tol: 1e-6,
            contraction_slack: 1e-6,
            simplex_divisions: 50,
            theorem2: Theorem2Config::default(),
            smm_seeds: 10,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalityReport {
    pub mdps: usize,
    /// Smallest `Q_{k+1} - Q_k` over all iterations and MDPs.
    pub min_improvement: f64,
    /// Largest `Q_pi - Q_final` over all random policies.
    pub max_dominance_gap: f64,
    pub max_contraction_ratio: f64,
    pub monotone: bool,
    pub dominant: bool,
    pub contracting: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SmmTrend {
    pub seeds: usize,
    pub decreased: usize,
    pub mean_initial_kl: f64,
    pub mean_final_kl: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub optimality: OptimalityReport,
    pub bound_capped: SweepReport,
    pub bound_unrestricted: SweepReport,
    pub theorem2: Theorem2Report,
    pub smm_trend: SmmTrend,
    pub failures: Vec<String>,
    pub passed: bool,
}

fn improvement(fault: Option<Fault>) -> impl Fn(&Array2<f64>) -> TabularPolicy {
    move |q| match fault {
        Some(Fault::ReversedImprovement) => soft_policy_improvement(&q.mapv(|v| -v)),
        None => soft_policy_improvement(q),
    }
}

fn optimality(config: &VerifyConfig, failures: &mut Vec<String>) -> Result<OptimalityReport> {
    let mut rng = stream(config.seed, Stream::Sampling);
    let mut report = OptimalityReport {
        mdps: config.mdps,
        min_improvement: f64::INFINITY,
        max_dominance_gap: f64::NEG_INFINITY,
        max_contraction_ratio: 0.0,
        monotone: true,
        dominant: true,
        contracting: true,
    };
    for m in 0..config.mdps {
        let ns = rng.random_range(1..=config.max_states);
        let na = rng.random_range(1..=config.max_actions);
        let mdp = TabularMdp::random(ns, na, config.gamma, &mut rng)?;
        let r_int = Array2::from_shape_fn((ns, na), |_| rng.random_range(0.0..0.5));
        let init = TabularPolicy::random(ns, na, &mut rng);
        let pi = match soft_policy_iteration_with(&mdp, &r_int, init, EVAL_TOL, improvement(config.fault)) {
            Ok(pi) => pi,
            Err(e) => {
                failures.push(format!("mdp {m}: policy iteration failed: {e}"));
                report.monotone = false;
                continue;
            }
        };
        let step = pi.min_improvement();
        report.min_improvement = report.min_improvement.min(step);
        if step < -config.monotone_tol {
            report.monotone = false;
            failures.push(format!("mdp {m}: soft Q decreased by {}", -step));
        }
        let mut ratio = contraction_ratio(&mdp, &pi.policy, &r_int, 1e-8)?;
        for p in 0..config.policies_per_mdp {
            let other = TabularPolicy::random(ns, na, &mut rng);
            if p < 5 {
                ratio = ratio.max(contraction_ratio(&mdp, &other, &r_int, 1e-8)?);
            }
            let q = soft_policy_evaluation(&mdp, &other, &r_int, EVAL_TOL)?.q;
            let gap = q.iter().zip(pi.q().iter()).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
            report.max_dominance_gap = report.max_dominance_gap.max(gap);
            if gap > config.dominance_tol && report.dominant {
                report.dominant = false;
                failures.push(format!("mdp {m}: random policy {p} beats the converged policy by {gap}"));
            }
        }
        report.max_contraction_ratio = report.max_contraction_ratio.max(ratio);
        if ratio > config.gamma + config.contraction_slack {
            report.contracting = false;
            failures.push(format!("mdp {m}: contraction ratio {ratio} exceeds gamma"));
        }
    }
    Ok(report)
}

fn verification_grid() -> GridWorldSpec {
    GridWorldSpec {
        width: 5,
        height: 5,
        walls: vec![[1, 1], [2, 1], [3, 3], [1, 3]],
        start: [0, 0],
        goal: [4, 4],
        max_steps: 30,
        slip_prob: 0.1,
    }
}

/// KL to a smoothed expert visitation before and after soft policy iteration
/// from a random policy, on a small gridworld with amplified task reward.
fn smm_trend(config: &VerifyConfig) -> Result<SmmTrend> {
    const REWARD_SCALE: f64 = 10.0;
    const SMOOTHING: f64 = 0.1;
    let spec = verification_grid();
    let mut mdp = gridworld_mdp(&spec, 0.95)?;
    mdp.r.mapv_inplace(|r| r * REWARD_SCALE);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    // hard value iteration for the expert
    let mut v = vec![0.0; ns];
    for _ in 0..2000 {
        v = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| mdp.r[[s, a]] + mdp.gamma * (0..ns).map(|t| mdp.p[[s, a, t]] * v[t]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    let greedy: Vec<usize> = (0..ns)
        .map(|s| {
            let q = |a: usize| mdp.r[[s, a]] + mdp.gamma * (0..ns).map(|t| mdp.p[[s, a, t]] * v[t]).sum::<f64>();
            (0..na).fold(0, |best, a| if q(a) > q(best) { a } else { best })
        })
        .collect();
    let expert = marginal_state_distribution(&mdp, &TabularPolicy::deterministic(&greedy, na), spec.max_steps)?;
    let target: Vec<f64> = expert.iter().map(|p| (1.0 - SMOOTHING) * p + SMOOTHING / ns as f64).collect();
    let r_int = Array2::zeros((ns, na));
    let mut rng = stream(config.seed, Stream::Monitor);
    let mut trend = SmmTrend { seeds: config.smm_seeds, decreased: 0, mean_initial_kl: 0.0, mean_final_kl: 0.0 };
    for _ in 0..config.smm_seeds {
        let init = TabularPolicy::random(ns, na, &mut rng);
        let kl_of = |pi: &TabularPolicy| -> Result<f64> {
            let rho = marginal_state_distribution(&mdp, pi, spec.max_steps)?;
            smm_kl(&DensityPair::new(rho, target.clone())?)
        };
        let first = kl_of(&init)?;
        let out = soft_policy_iteration_with(&mdp, &r_int, init, EVAL_TOL, soft_policy_improvement)?;
        let last = kl_of(&out.policy)?;
        trend.decreased += usize::from(last < first);
        trend.mean_initial_kl += first / config.smm_seeds as f64;
        trend.mean_final_kl += last / config.smm_seeds as f64;
    }
    Ok(trend)
}

/// Run every tabular check; `passed` reflects only the hard assertions.
pub fn run_verification(config: &VerifyConfig) -> Result<VerificationReport> {
    let mut failures = Vec::new();
    let optimality = optimality(config, &mut failures)?;
    let bound_capped = simplex_sweep(config.simplex_divisions, Some((-1.0f64).exp()))?;
    if !bound_capped.all_hold() {
        failures.push(format!(
            "entropy bound failed on {} capped pairs",
            bound_capped.pairs - bound_capped.holds
        ));
    }
    let bound_unrestricted = simplex_sweep(config.simplex_divisions, None)?;
    let theorem2 = theorem2_report(&config.theorem2)?;
    if !theorem2.exact_cases_hold() {
        failures.push("double-critic minimum changed the reward in an exact case".into());
    }
    let smm_trend = smm_trend(config)?;
    let passed = failures.is_empty();
    Ok(VerificationReport {
        optimality,
        bound_capped,
        bound_unrestricted,
        theorem2,
        smm_trend,
        failures,
        passed,
    })
}
