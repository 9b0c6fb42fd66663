//! Actor-critic learners: a soft actor-critic core with twin EMA-target
//! critics, conservative (CQL) and calibrated (Cal-QL) critic regularisers,
//! and an advantage-weighted (AWAC) actor.

mod critic;
mod policy;

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use critic::{critic_input, DoubleQ};
use critic::{backprop, check_index, Probe};
pub use policy::{
    gaussian_log_prob_of, log_one_minus_tanh_sq, log_softmax, sample_categorical, sample_gaussian, softplus,
    GaussianSample, ACTION_CLIP,
};

use crate::approx::{Activation, AdamState, Head, Mlp, MlpSpec};
use crate::entropy::ConditionMode;
use crate::envs::{Action, ActionSpace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Sac,
    #[default]
    Cql,
    #[serde(alias = "cal-ql")]
    Calql,
    Awac,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sac" => Ok(Self::Sac),
            "cql" => Ok(Self::Cql),
            "calql" | "cal-ql" => Ok(Self::Calql),
            "awac" => Ok(Self::Awac),
            other => Err(Error::InvalidArgument(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sac => "sac",
            Self::Cql => "cql",
            Self::Calql => "calql",
            Self::Awac => "awac",
        })
    }
}

/// Form of the conservative regulariser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CqlVariant {
    /// `E[-Q(s, a) + Q(s', pi(s'))]`.
    #[default]
    NextState,
    /// `E[logsumexp_a Q(s, a) - Q(s, a_data)]`.
    LogSumExp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub algo: Algo,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub gamma: f64,
    /// Weight on the old target network in the EMA update.
    pub ema_rate: f64,
    /// Entropy temperature (initial value when auto-tuned).
    pub alpha: f64,
    pub autotune_alpha: bool,
    pub alpha_lr: f64,
    /// Defaults to `-action_dim` (continuous) or `0.5 ln |A|` (discrete).
    pub target_entropy: Option<f64>,
    pub conservative_weight: f64,
    pub cql_variant: CqlVariant,
    /// Uniform and policy samples per state for the continuous logsumexp.
    pub cql_samples: usize,
    pub awac_lambda: f64,
    pub awac_max_weight: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Cql,
            hidden: vec![64, 64, 64],
            activation: Activation::Relu,
            critic_lr: 3e-4,
            actor_lr: 1e-4,
            gamma: 0.99,
            ema_rate: 0.995,
            alpha: 0.2,
            autotune_alpha: false,
            alpha_lr: 3e-4,
            target_entropy: None,
            conservative_weight: 1.0,
            cql_variant: CqlVariant::NextState,
            cql_samples: 10,
            awac_lambda: 1.0,
            awac_max_weight: 100.0,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.awac_lambda > 0.0) || !(self.awac_max_weight > 0.0) {
            return bad("AWAC lambda and weight clip must be positive");
        }
        if !(self.conservative_weight >= 0.0) {
            return bad("conservative_weight must be >= 0");
        }
        if !(self.critic_lr > 0.0 && self.actor_lr > 0.0 && self.alpha_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.cql_samples == 0 {
            return bad("cql_samples must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Actions {
    Discrete(Vec<usize>),
    Continuous(Array2<f64>),
}

impl Actions {
    pub fn len(&self) -> usize {
        match self {
            Actions::Discrete(a) => a.len(),
            Actions::Continuous(a) => a.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Minibatch of transitions. `dones` marks true terminals only.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Actions,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
    /// Behaviour-policy return estimates, required by Cal-QL.
    pub reference: Option<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn validate(&self, state_dim: usize) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let shapes_ok = self.states.dim() == (n, state_dim)
            && self.next_states.dim() == (n, state_dim)
            && self.actions.len() == n
            && self.dones.len() == n
            && self.reference.as_ref().is_none_or(|r| r.len() == n);
        if !shapes_ok {
            return Err(Error::Dimension("batch fields disagree in length or state width".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("batch rewards".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CriticStats {
    pub loss: f64,
    pub bellman: f64,
    pub regularizer: f64,
    pub mean_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_q: f64,
    pub alpha: f64,
}

pub struct CriticObjective {
    pub stats: CriticStats,
    pub grads: [Vec<f64>; 2],
    pub targets: Vec<f64>,
}

pub struct ActorObjective {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Mean policy log-probability at the batch states.
    pub mean_log_prob: f64,
}

/// Repeat each row `m` times consecutively.
fn repeat_rows(x: ArrayView2<f64>, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows() * m, x.ncols()), |(r, c)| x[[r / m, c]])
}

/// Samples shared by both critics when evaluating a regulariser.
enum RegSamples {
    None,
    /// Action samples at the batch states, one per row.
    AtStates(Array2<f64>),
    /// Stacked `[state | action]` rows (`m` per state) with the log sampling
    /// density of each row.
    LogSumExp { inputs: Array2<f64>, log_density: Vec<f64>, per_state: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActorCritic {
    pub config: AgentConfig,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub policy: Mlp,
    pub critics: DoubleQ,
    /// Independently initialised critics trained with a plain Bellman loss,
    /// used only to supply entropy conditions when enabled.
    pub scratch: Option<DoubleQ>,
    log_alpha: f64,
    policy_opt: AdamState,
    alpha_opt: AdamState,
}

impl ActorCritic {
    pub fn new(config: AgentConfig, state_dim: usize, action_space: ActionSpace, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let spec = match action_space {
            ActionSpace::Discrete(n) => MlpSpec::new(state_dim, &config.hidden, n, config.activation, Head::Linear),
            ActionSpace::Continuous(d) => MlpSpec::new(
                state_dim,
                &config.hidden,
                2 * d,
                config.activation,
                Head::Gaussian { log_std_min: config.log_std_min, log_std_max: config.log_std_max },
            ),
        };
        let policy = Mlp::new(spec, rng)?;
        let critics = Self::make_critics(&config, state_dim, action_space, rng)?;
        let n = policy.params().len();
        Ok(Self {
            log_alpha: config.alpha.ln(),
            policy_opt: AdamState::new(n, config.actor_lr),
            alpha_opt: AdamState::new(1, config.alpha_lr),
            config,
            state_dim,
            action_space,
            policy,
            critics,
            scratch: None,
        })
    }

    fn make_critics(config: &AgentConfig, state_dim: usize, space: ActionSpace, rng: &mut impl Rng) -> Result<DoubleQ> {
        DoubleQ::new(state_dim, space, &config.hidden, config.activation, config.critic_lr, config.gamma, config.ema_rate, rng)
    }

    /// Attach freshly initialised condition critics.
    pub fn enable_scratch_critics(&mut self, rng: &mut impl Rng) -> Result<()> {
        self.scratch = Some(Self::make_critics(&self.config, self.state_dim, self.action_space, rng)?);
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        if self.config.autotune_alpha {
            self.log_alpha.exp()
        } else {
            self.config.alpha
        }
    }

    /// Temperature applied to log-probabilities in the bootstrap target and actor.
    fn soft_alpha(&self) -> f64 {
        if self.config.algo == Algo::Awac {
            0.0
        } else {
            self.alpha()
        }
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(match self.action_space {
            ActionSpace::Discrete(n) => 0.5 * (n as f64).ln(),
            ActionSpace::Continuous(d) => -(d as f64),
        })
    }

    fn check_states(&self, states: ArrayView2<f64>) -> Result<()> {
        if states.ncols() != self.state_dim {
            return Err(Error::Dimension(format!("states have {} columns, expected {}", states.ncols(), self.state_dim)));
        }
        Ok(())
    }

    /// Row-wise action log-probabilities (discrete policies only).
    pub fn action_log_probs(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_states(states)?;
        Ok(log_softmax(self.policy.forward(states)?.view()))
    }

    pub fn select_action(&self, state: &[f64], stochastic: bool, rng: &mut impl Rng) -> Result<Action> {
        if state.len() != self.state_dim {
            return Err(Error::Dimension(format!("state of length {} for a {}-d policy", state.len(), self.state_dim)));
        }
        let x = Array2::from_shape_vec((1, state.len()), state.to_vec()).unwrap();
        let out = self.policy.forward(x.view())?;
        match self.action_space {
            ActionSpace::Discrete(_) => {
                let logp = log_softmax(out.view());
                let row = logp.row(0).to_vec();
                Ok(Action::Discrete(if stochastic { sample_categorical(&row, rng) } else { policy::argmax(&row) }))
            }
            ActionSpace::Continuous(d) => {
                if stochastic {
                    Ok(Action::Continuous(sample_gaussian(out.view(), rng).action.row(0).to_vec()))
                } else {
                    Ok(Action::Continuous(out.slice(s![0, ..d]).mapv(f64::tanh).to_vec()))
                }
            }
        }
    }

    /// Entropy conditions for a batch: `min(Q1, Q2)` at the taken actions,
    /// the policy state value, or nothing.
    pub fn condition_values(
        &self,
        states: ArrayView2<f64>,
        actions: &Actions,
        mode: ConditionMode,
        use_scratch: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        const VALUE_SAMPLES: usize = 4;
        let critics = if use_scratch {
            self.scratch.as_ref().ok_or_else(|| Error::InvalidArgument("scratch critics are not enabled".into()))?
        } else {
            &self.critics
        };
        match mode {
            ConditionMode::None => Ok(Vec::new()),
            ConditionMode::Q => critics.q_hat(states, actions),
            ConditionMode::V => match self.action_space {
                ActionSpace::Discrete(_) => {
                    let logp = self.action_log_probs(states)?;
                    let q = critics.all_actions_min(&critics.online, states)?;
                    Ok((&logp.mapv(f64::exp) * &q).sum_axis(Axis(1)).to_vec())
                }
                ActionSpace::Continuous(_) => {
                    let out = self.policy.forward(states)?;
                    let mut v = vec![0.0; states.nrows()];
                    for _ in 0..VALUE_SAMPLES {
                        let smp = sample_gaussian(out.view(), rng);
                        for (acc, q) in v.iter_mut().zip(critics.q_hat(states, &Actions::Continuous(smp.action))?) {
                            *acc += q / VALUE_SAMPLES as f64;
                        }
                    }
                    Ok(v)
                }
            },
        }
    }

    fn regularized(&self) -> bool {
        matches!(self.config.algo, Algo::Cql | Algo::Calql) && self.config.conservative_weight > 0.0
    }

    /// Critic loss `1/2 sum_i (mean (Q_i - y)^2 + w R_i)` and its gradients.
    /// The target `y` uses the EMA critics' minimum and carries no gradient.
    pub fn critic_objective(&self, batch: &Batch, rng: &mut impl Rng) -> Result<CriticObjective> {
        self.critic_objective_for(&self.critics, batch, self.regularized(), rng)
    }

    fn critic_objective_for(
        &self,
        critics: &DoubleQ,
        batch: &Batch,
        regularized: bool,
        rng: &mut impl Rng,
    ) -> Result<CriticObjective> {
        batch.validate(self.state_dim)?;
        let n = batch.len();
        let nf = n as f64;
        let alpha = self.soft_alpha();
        let s = batch.states.view();
        let s2 = batch.next_states.view();
        let next_out = self.policy.forward(s2)?;

        // bootstrap values at s'
        let (next_value, next_probs, next_sample) = match self.action_space {
            ActionSpace::Discrete(_) => {
                let logp = log_softmax(next_out.view());
                let q = critics.all_actions_min(&critics.target, s2)?;
                let pi = logp.mapv(f64::exp);
                let v = (&pi * &(&q - &(&logp * alpha))).sum_axis(Axis(1)).to_vec();
                (v, Some(pi), None)
            }
            ActionSpace::Continuous(_) => {
                let smp = sample_gaussian(next_out.view(), rng);
                let acts = Actions::Continuous(smp.action.clone());
                let [a, b] = critics.values_of(&critics.target, s2, &acts)?;
                let v = (0..n).map(|i| a[i].min(b[i]) - alpha * smp.log_prob[i]).collect();
                (v, None, Some(smp))
            }
        };
        let targets: Vec<f64> = (0..n)
            .map(|i| batch.rewards[i] + critics.gamma * if batch.dones[i] { 0.0 } else { next_value[i] })
            .collect();
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("Bellman targets".into()));
        }

        let w = if regularized { self.config.conservative_weight } else { 0.0 };
        let reference = if w > 0.0 && self.config.algo == Algo::Calql {
            Some(batch.reference.as_ref().ok_or_else(|| Error::InvalidArgument("Cal-QL needs reference values".into()))?)
        } else {
            None
        };
        let samples = self.regularizer_samples(w, s, rng)?;

        let mut grads = [Vec::new(), Vec::new()];
        let mut bellman = 0.0;
        let mut regularizer = 0.0;
        let mut q_taken = [vec![0.0; n], vec![0.0; n]];
        for i in 0..2 {
            let net = &critics.online[i];
            let mut probes = Vec::new();
            // probe 0: Q at the dataset actions (all actions when discrete)
            let mut main = match &batch.actions {
                Actions::Discrete(_) => Probe::new(net, s)?,
                Actions::Continuous(a) => Probe::new(net, critic_input(s, Some(a.view())).view())?,
            };
            let col = |b: usize| -> Result<usize> {
                match &batch.actions {
                    Actions::Discrete(a) => check_index(a[b], main_cols(self.action_space)).map(|_| a[b]),
                    Actions::Continuous(_) => Ok(0),
                }
            };
            let mut l_i = 0.0;
            for b in 0..n {
                let c = col(b)?;
                let q = main.out[[b, c]];
                q_taken[i][b] = q;
                let e = q - targets[b];
                l_i += e * e / nf;
                main.grad[[b, c]] += e / nf;
            }
            bellman += 0.5 * l_i;

            if w > 0.0 {
                let half_w = 0.5 * w;
                let mut r_i = 0.0;
                // the -E_D[Q(s, a)] half shared by every variant
                for b in 0..n {
                    r_i -= q_taken[i][b] / nf;
                    main.grad[[b, col(b)?]] -= half_w / nf;
                }
                match (self.config.algo, self.config.cql_variant, &samples) {
                    (Algo::Cql, CqlVariant::NextState, _) => match (&next_probs, &next_sample) {
                        (Some(pi), _) => {
                            let mut p = Probe::new(net, s2)?;
                            r_i += (&p.out * pi).sum() / nf;
                            p.grad = pi * (half_w / nf);
                            probes.push(p);
                        }
                        (None, Some(smp)) => {
                            let mut p = Probe::new(net, critic_input(s2, Some(smp.action.view())).view())?;
                            r_i += p.out.sum() / nf;
                            p.grad.fill(half_w / nf);
                            probes.push(p);
                        }
                        _ => unreachable!("one of the two is always set"),
                    },
                    (Algo::Cql, CqlVariant::LogSumExp, RegSamples::None) => {
                        // discrete: exact logsumexp over actions
                        for b in 0..n {
                            let row = main.out.row(b).to_owned();
                            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
                            r_i += (top + z.ln()) / nf;
                            for (a, v) in row.iter().enumerate() {
                                main.grad[[b, a]] += half_w / nf * (v - top).exp() / z;
                            }
                        }
                    }
                    (Algo::Cql, CqlVariant::LogSumExp, RegSamples::LogSumExp { inputs, log_density, per_state }) => {
                        let mut p = Probe::new(net, inputs.view())?;
                        let m = *per_state;
                        for b in 0..n {
                            let xs: Vec<f64> = (0..m).map(|j| p.out[[b * m + j, 0]] - log_density[b * m + j]).collect();
                            let top = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = xs.iter().map(|x| (x - top).exp()).sum();
                            r_i += (top + z.ln() - (m as f64).ln()) / nf;
                            for (j, x) in xs.iter().enumerate() {
                                p.grad[[b * m + j, 0]] = half_w / nf * (x - top).exp() / z;
                            }
                        }
                        probes.push(p);
                    }
                    (Algo::Calql, _, RegSamples::None) => {
                        let pi = self.action_log_probs(s)?.mapv(f64::exp);
                        let v = reference.expect("checked above");
                        for b in 0..n {
                            for a in 0..pi.ncols() {
                                let q = main.out[[b, a]];
                                r_i += pi[[b, a]] * q.max(v[b]) / nf;
                                if q > v[b] {
                                    main.grad[[b, a]] += half_w / nf * pi[[b, a]];
                                }
                            }
                        }
                    }
                    (Algo::Calql, _, RegSamples::AtStates(acts)) => {
                        let mut p = Probe::new(net, critic_input(s, Some(acts.view())).view())?;
                        let v = reference.expect("checked above");
                        for b in 0..n {
                            let q = p.out[[b, 0]];
                            r_i += q.max(v[b]) / nf;
                            if q > v[b] {
                                p.grad[[b, 0]] = half_w / nf;
                            }
                        }
                        probes.push(p);
                    }
                    _ => unreachable!("regularizer samples match the configured variant"),
                }
                regularizer += half_w * r_i;
            }
            probes.push(main);
            grads[i] = backprop(net, &probes)?;
        }
        let mean_q = (0..n).map(|b| q_taken[0][b].min(q_taken[1][b])).sum::<f64>() / nf;
        Ok(CriticObjective {
            stats: CriticStats { loss: bellman + regularizer, bellman, regularizer, mean_q },
            grads,
            targets,
        })
    }

    fn regularizer_samples(&self, w: f64, s: ArrayView2<f64>, rng: &mut impl Rng) -> Result<RegSamples> {
        let d = match self.action_space {
            ActionSpace::Continuous(d) if w > 0.0 => d,
            _ => return Ok(RegSamples::None),
        };
        match self.config.algo {
            Algo::Calql => {
                let out = self.policy.forward(s)?;
                Ok(RegSamples::AtStates(sample_gaussian(out.view(), rng).action))
            }
            Algo::Cql if self.config.cql_variant == CqlVariant::LogSumExp => {
                let m = self.config.cql_samples;
                let n = s.nrows();
                let reps = repeat_rows(s, m);
                let uniform = Array2::from_shape_fn((n * m, d), |_| rng.random_range(-1.0..1.0));
                let out = self.policy.forward(reps.view())?;
                let smp = sample_gaussian(out.view(), rng);
                // per state: m uniform rows then m policy rows
                let mut rows = Vec::with_capacity(2 * n * m);
                let mut log_density = Vec::with_capacity(2 * n * m);
                let uniform_density = -(d as f64) * 2f64.ln();
                for b in 0..n {
                    for j in 0..m {
                        let r = b * m + j;
                        rows.push((r, false));
                        log_density.push(uniform_density);
                    }
                    for j in 0..m {
                        let r = b * m + j;
                        rows.push((r, true));
                        log_density.push(smp.log_prob[r]);
                    }
                }
                let inputs = Array2::from_shape_fn((2 * n * m, s.ncols() + d), |(row, c)| {
                    let (r, from_policy) = rows[row];
                    if c < s.ncols() {
                        reps[[r, c]]
                    } else if from_policy {
                        smp.action[[r, c - s.ncols()]]
                    } else {
                        uniform[[r, c - s.ncols()]]
                    }
                });
                Ok(RegSamples::LogSumExp { inputs, log_density, per_state: 2 * m })
            }
            _ => Ok(RegSamples::None),
        }
    }

    /// Actor loss and gradient with the critics held fixed.
    ///
    /// SAC family: `E[alpha log pi(a|s) - min Q(s, a)]`, `a ~ pi`.
    /// AWAC: `-E[w log pi(a_data|s)]`, `w = min(exp(A / lambda), clip)`, with
    /// the weights held constant in the gradient.
    pub fn actor_objective(&self, batch: &Batch, rng: &mut impl Rng) -> Result<ActorObjective> {
        batch.validate(self.state_dim)?;
        let n = batch.len();
        let nf = n as f64;
        let s = batch.states.view();
        let (out, cache) = self.policy.forward_cached(s)?;
        let mut grad_out = Array2::zeros(out.dim());
        let mut loss = 0.0;
        let mut mean_log_prob = 0.0;
        let alpha = self.alpha();
        match (self.config.algo, &self.action_space) {
            (Algo::Awac, ActionSpace::Discrete(_)) => {
                let Actions::Discrete(acts) = &batch.actions else {
                    return Err(Error::Dimension("continuous actions for a discrete agent".into()));
                };
                let logp = log_softmax(out.view());
                let q = self.critics.all_actions_min(&self.critics.online, s)?;
                for b in 0..n {
                    let a = acts[b];
                    check_index(a, logp.ncols())?;
                    let v: f64 = (0..logp.ncols()).map(|j| logp[[b, j]].exp() * q[[b, j]]).sum();
                    let weight = self.awac_weight(q[[b, a]] - v);
                    loss -= weight * logp[[b, a]] / nf;
                    mean_log_prob += (0..logp.ncols()).map(|j| logp[[b, j]].exp() * logp[[b, j]]).sum::<f64>() / nf;
                    for j in 0..logp.ncols() {
                        let onehot = if j == a { 1.0 } else { 0.0 };
                        grad_out[[b, j]] = -weight * (onehot - logp[[b, j]].exp()) / nf;
                    }
                }
            }
            (Algo::Awac, ActionSpace::Continuous(d)) => {
                let Actions::Continuous(acts) = &batch.actions else {
                    return Err(Error::Dimension("discrete actions for a continuous agent".into()));
                };
                let d = *d;
                let (logp, u) = gaussian_log_prob_of(out.view(), acts.view());
                let q_data = self.critics.q_hat(s, &batch.actions)?;
                let smp = sample_gaussian(out.view(), rng);
                let q_pi = self.critics.q_hat(s, &Actions::Continuous(smp.action))?;
                for b in 0..n {
                    if !logp[b].is_finite() {
                        return Err(Error::NonFinite("dataset action log-probability".into()));
                    }
                    let weight = self.awac_weight(q_data[b] - q_pi[b]);
                    loss -= weight * logp[b] / nf;
                    mean_log_prob += smp.log_prob[b] / nf;
                    for j in 0..d {
                        let (mu, log_std) = (out[[b, j]], out[[b, d + j]]);
                        let z = (u[[b, j]] - mu) / log_std.exp();
                        grad_out[[b, j]] = -weight * z / log_std.exp() / nf;
                        grad_out[[b, d + j]] = -weight * (z * z - 1.0) / nf;
                    }
                }
            }
            (_, ActionSpace::Discrete(_)) => {
                let logp = log_softmax(out.view());
                let q = self.critics.all_actions_min(&self.critics.online, s)?;
                for b in 0..n {
                    let f: Vec<f64> = (0..logp.ncols()).map(|j| alpha * logp[[b, j]] - q[[b, j]]).collect();
                    let pi: Vec<f64> = (0..logp.ncols()).map(|j| logp[[b, j]].exp()).collect();
                    let ef: f64 = pi.iter().zip(&f).map(|(p, v)| p * v).sum();
                    loss += ef / nf;
                    mean_log_prob += pi.iter().zip(logp.row(b)).map(|(p, l)| p * l).sum::<f64>() / nf;
                    for j in 0..pi.len() {
                        grad_out[[b, j]] = pi[j] * (f[j] - ef) / nf;
                    }
                }
            }
            (_, ActionSpace::Continuous(d)) => {
                let d = *d;
                let smp = sample_gaussian(out.view(), rng);
                let (q_min, dq_da) = self.min_q_action_grad(s, &smp.action)?;
                for b in 0..n {
                    let lp = smp.log_prob[b];
                    if !lp.is_finite() {
                        return Err(Error::NonFinite("policy log-probability".into()));
                    }
                    loss += (alpha * lp - q_min[b]) / nf;
                    mean_log_prob += lp / nf;
                    for j in 0..d {
                        let a = smp.action[[b, j]];
                        let dl_du = 2.0 * alpha * a - dq_da[[b, j]] * (1.0 - a * a);
                        let sigma = out[[b, d + j]].exp();
                        grad_out[[b, j]] = dl_du / nf;
                        grad_out[[b, d + j]] = (-alpha + dl_du * sigma * smp.eps[[b, j]]) / nf;
                    }
                }
            }
        }
        let grad = self.policy.backward(&cache, grad_out.view())?.param_grad;
        Ok(ActorObjective { loss, grad, mean_log_prob })
    }

    fn awac_weight(&self, advantage: f64) -> f64 {
        (advantage / self.config.awac_lambda).exp().min(self.config.awac_max_weight)
    }

    /// `min(Q1, Q2)(s, a)` and its gradient in `a`, taken through whichever
    /// critic attains the minimum (the first on ties).
    fn min_q_action_grad(&self, s: ArrayView2<f64>, actions: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let x = critic_input(s, Some(actions.view()));
        let mut probes = [Probe::new(&self.critics.online[0], x.view())?, Probe::new(&self.critics.online[1], x.view())?];
        let n = s.nrows();
        let mut q = Vec::with_capacity(n);
        for b in 0..n {
            let (q1, q2) = (probes[0].out[[b, 0]], probes[1].out[[b, 0]]);
            let pick = usize::from(q2 < q1);
            probes[pick].grad[[b, 0]] = 1.0;
            q.push(q1.min(q2));
        }
        let sd = s.ncols();
        let mut grad = Array2::zeros(actions.dim());
        for (i, p) in probes.iter().enumerate() {
            let back = self.critics.online[i].backward(&p.cache, p.grad.view())?;
            grad += &back.input_grad.slice(s![.., sd..]);
        }
        Ok((q, grad))
    }

    /// One gradient step on the critics, then the actor and temperature,
    /// then the EMA target update.
    pub fn update(&mut self, batch: &Batch, rng: &mut impl Rng) -> Result<UpdateStats> {
        let critic = self.critic_objective(batch, rng)?;
        self.critics.apply_gradients(&critic.grads)?;
        let actor = self.actor_objective(batch, rng)?;
        self.policy_opt.step(self.policy.params_mut(), &actor.grad)?;
        if self.config.autotune_alpha && self.config.algo != Algo::Awac {
            // d/d(log alpha) of -log_alpha * (log pi + target entropy)
            let g = -(actor.mean_log_prob + self.target_entropy());
            let mut la = [self.log_alpha];
            self.alpha_opt.step(&mut la, &[g])?;
            self.log_alpha = la[0];
        }
        self.critics.ema_update()?;
        Ok(UpdateStats {
            critic_loss: critic.stats.loss,
            actor_loss: actor.loss,
            mean_q: critic.stats.mean_q,
            alpha: self.alpha(),
        })
    }

    /// Plain Bellman step for the scratch condition critics.
    pub fn update_scratch(&mut self, batch: &Batch, rng: &mut impl Rng) -> Result<()> {
        let Some(scratch) = self.scratch.as_ref() else {
            return Err(Error::InvalidArgument("scratch critics are not enabled".into()));
        };
        let obj = self.critic_objective_for(scratch, batch, false, rng)?;
        let scratch = self.scratch.as_mut().unwrap();
        scratch.apply_gradients(&obj.grads)?;
        scratch.ema_update()
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let agent: Self = serde_json::from_reader(r).map_err(|e| Error::Schema(format!("agent checkpoint: {e}")))?;
        agent.config.validate()?;
        Ok(agent)
    }
}

fn main_cols(space: ActionSpace) -> usize {
    match space {
        ActionSpace::Discrete(n) => n,
        ActionSpace::Continuous(_) => 1,
    }
}
