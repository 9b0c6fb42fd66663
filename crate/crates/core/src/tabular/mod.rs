//! Exact dynamic programming on finite MDPs: soft policy evaluation,
//! improvement and iteration, state-marginal quantities, and the numerical
//! checks built on them.

mod density;
mod mdp;
mod soft;
mod theorem2;
mod verify;

pub use density::{
    entropy_bound_check, marginal_state_distribution, simplex_sweep, smm_kl, BoundReport, DensityPair, SweepReport,
};
pub use mdp::{gridworld_mdp, TabularMdp, TabularPolicy};
pub use soft::{
    contraction_ratio, soft_policy_evaluation, soft_policy_improvement, soft_policy_iteration,
    soft_policy_iteration_with, soft_q_exact, PolicyIteration, SoftEvaluation, EVAL_TOL, MAX_SWEEPS,
};
pub use theorem2::{theorem2_report, Theorem2Config, Theorem2Report};
pub use verify::{run_verification, Fault, VerificationReport, VerifyConfig};
