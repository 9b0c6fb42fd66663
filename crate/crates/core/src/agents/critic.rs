use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Actions;
use crate::approx::{Activation, AdamState, ForwardCache, Head, Mlp, MlpSpec};
use crate::envs::ActionSpace;
use crate::{Error, Result};

/// Critic inputs: states alone for discrete actions (one output per action),
/// `[state | action]` rows for continuous ones (a single output).
pub fn critic_input(states: ArrayView2<f64>, actions: Option<ArrayView2<f64>>) -> Array2<f64> {
    match actions {
        Some(a) => concatenate(Axis(1), &[states, a]).expect("row counts agree"),
        None => states.to_owned(),
    }
}

/// One forward pass kept for a later backward pass; `grad` accumulates the
/// loss gradient with respect to `out`.
pub(crate) struct Probe {
    pub out: Array2<f64>,
    pub grad: Array2<f64>,
    pub cache: ForwardCache,
}

impl Probe {
    pub fn new(net: &Mlp, x: ArrayView2<f64>) -> Result<Self> {
        let (out, cache) = net.forward_cached(x)?;
        let grad = Array2::zeros(out.dim());
        Ok(Self { out, grad, cache })
    }
}

/// Sum the parameter gradients of several probes of one network.
pub(crate) fn backprop(net: &Mlp, probes: &[Probe]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; net.params().len()];
    for p in probes {
        let g = net.backward(&p.cache, p.grad.view())?.param_grad;
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total)
}

/// Twin critics with exponential-moving-average targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoubleQ {
    pub online: [Mlp; 2],
    pub target: [Mlp; 2],
    /// Weight kept on the old target in each update.
    pub ema_rate: f64,
    pub gamma: f64,
    pub action_space: ActionSpace,
    pub(crate) opt: [AdamState; 2],
}

impl DoubleQ {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        action_space: ActionSpace,
        hidden: &[usize],
        activation: Activation,
        lr: f64,
        gamma: f64,
        ema_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) || !(0.0..=1.0).contains(&ema_rate) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} / ema rate {ema_rate} out of range")));
        }
        let spec = match action_space {
            ActionSpace::Discrete(n) => MlpSpec::new(state_dim, hidden, n, activation, Head::Linear),
            ActionSpace::Continuous(d) => MlpSpec::new(state_dim + d, hidden, 1, activation, Head::Linear),
        };
        let q1 = Mlp::new(spec.clone(), rng)?;
        let q2 = Mlp::new(spec, rng)?;
        let n = q1.params().len();
        Ok(Self {
            target: [q1.clone(), q2.clone()],
            online: [q1, q2],
            ema_rate,
            gamma,
            action_space,
            opt: [AdamState::new(n, lr), AdamState::new(n, lr)],
        })
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.action_space, ActionSpace::Discrete(_))
    }

    /// Q of each network in `nets` at the given actions.
    pub fn values_of(&self, nets: &[Mlp; 2], states: ArrayView2<f64>, actions: &Actions) -> Result<[Vec<f64>; 2]> {
        let eval = |net: &Mlp| -> Result<Vec<f64>> {
            match actions {
                Actions::Discrete(a) => {
                    let out = net.forward(states)?;
                    a.iter().enumerate().map(|(i, &ai)| check_index(ai, out.ncols()).map(|_| out[[i, ai]])).collect()
                }
                Actions::Continuous(a) => Ok(net.forward(critic_input(states, Some(a.view())).view())?.column(0).to_vec()),
            }
        };
        Ok([eval(&nets[0])?, eval(&nets[1])?])
    }

    /// `min(Q1, Q2)` of the online critics.
    pub fn q_hat(&self, states: ArrayView2<f64>, actions: &Actions) -> Result<Vec<f64>> {
        let [a, b] = self.values_of(&self.online, states, actions)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    /// Elementwise minimum over the pair for every discrete action.
    pub fn all_actions_min(&self, nets: &[Mlp; 2], states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let a = nets[0].forward(states)?;
        let b = nets[1].forward(states)?;
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|x, y| x.min(*y)))
    }

    /// `target <- (1 - ema_rate) * online + ema_rate * target`.
    pub fn ema_update(&mut self) -> Result<()> {
        for i in 0..2 {
            self.target[i].blend_from(&self.online[i], self.ema_rate)?;
        }
        Ok(())
    }

    pub(crate) fn apply_gradients(&mut self, grads: &[Vec<f64>; 2]) -> Result<()> {
        for i in 0..2 {
            self.opt[i].step(self.online[i].params_mut(), &grads[i])?;
        }
        Ok(())
    }
}

pub(crate) fn check_index(a: usize, n: usize) -> Result<()> {
    if a >= n {
        return Err(Error::Dimension(format!("action {a} outside {n} discrete actions")));
    }
    Ok(())
}
