//! Behavior policies that produce offline datasets.
//!
//! `medium` is a policy trained until it reaches half of the expert score
//! (normalised score 50), then frozen and perturbed with epsilon-random
//! actions. `medium-replay` is the replay log of that training run.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Action, EnvSpec, Environment, GridWorldSpec, PointMassSpec, Transition};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Probability of replacing the frozen policy's action by a uniform one.
pub const MEDIUM_EPSILON: f64 = 0.1;
/// Normalised score at which behavior training stops.
pub const MEDIUM_TARGET_SCORE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    Medium,
    MediumReplay,
    Random,
}

impl FromStr for Behavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Behavior::Medium),
            "medium-replay" => Ok(Behavior::MediumReplay),
            "random" => Ok(Behavior::Random),
            other => Err(Error::UnknownBehavior(other.to_string())),
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Behavior::Medium => "medium",
            Behavior::MediumReplay => "medium-replay",
            Behavior::Random => "random",
        })
    }
}

/// A concrete behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorPolicy {
    Uniform,
    /// Greedy action per gridworld cell.
    Tabular { greedy: Vec<usize>, epsilon: f64, grid: GridWorldSpec },
    /// `a = clip(kp * (goal - p) - kd * v)`.
    Linear { kp: f64, kd: f64, epsilon: f64, goal: [f64; 2] },
}

impl BehaviorPolicy {
    pub fn act(&self, spec: &EnvSpec, state: &[f64], rng: &mut StreamRng) -> Action {
        let uniform = |rng: &mut StreamRng| match spec {
            EnvSpec::Gridworld(_) => Action::Discrete(rng.random_range(0..4)),
            EnvSpec::Pointmass(_) => {
                Action::Continuous(vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
            }
        };
        match self {
            BehaviorPolicy::Uniform => uniform(rng),
            BehaviorPolicy::Tabular { greedy, epsilon, grid } => {
                if rng.random::<f64>() < *epsilon {
                    uniform(rng)
                } else {
                    Action::Discrete(greedy[grid.cell_index(grid.cell_of(state))])
                }
            }
            BehaviorPolicy::Linear { kp, kd, epsilon, goal } => {
                if rng.random::<f64>() < *epsilon {
                    uniform(rng)
                } else {
                    Action::Continuous(
                        (0..2).map(|i| (kp * (goal[i] - state[i]) - kd * state[2 + i]).clamp(-1.0, 1.0)).collect(),
                    )
                }
            }
        }
    }
}

/// Run one episode, appending its transitions to `log`. Returns the return.
pub(crate) fn run_episode(
    spec: &EnvSpec,
    env: &mut dyn Environment,
    policy: &BehaviorPolicy,
    seed: u64,
    rng: &mut StreamRng,
    log: &mut Vec<Transition>,
) -> Result<f64> {
    let mut state = env.reset(seed);
    let mut ret = 0.0;
    loop {
        let action = policy.act(spec, &state, rng);
        let t = env.step(&action)?;
        ret += t.reward;
        state = t.next_state.clone();
        let end = t.ends_episode();
        log.push(t);
        if end {
            return Ok(ret);
        }
    }
}

/// Result of a behavior training run.
pub(crate) struct TrainedBehavior {
    pub policy: BehaviorPolicy,
    /// Every transition experienced while training, in order.
    pub replay: Vec<Transition>,
    /// Normalised score of the frozen noisy policy.
    pub score: f64,
}

const MAX_TRAINING_EPISODES: usize = 20_000;

/// Train a mediocre policy, stopping once the epsilon-noisy frozen policy
/// reaches [`MEDIUM_TARGET_SCORE`] or the replay log holds
/// `min_replay` transitions, whichever comes last.
pub(crate) fn train_medium(spec: &EnvSpec, min_replay: usize, rng: &mut StreamRng) -> Result<TrainedBehavior> {
    match spec {
        EnvSpec::Gridworld(g) => train_gridworld(g, spec, min_replay, rng),
        EnvSpec::Pointmass(p) => train_pointmass(p, spec, min_replay, rng),
    }
}

fn noisy_tabular(greedy: &[usize], epsilon: f64) -> Vec<[f64; 4]> {
    greedy
        .iter()
        .map(|&g| {
            let mut row = [epsilon / 4.0; 4];
            row[g] += 1.0 - epsilon;
            row
        })
        .collect()
}

/// Tabular Q-learning with an epsilon-greedy explorer. The frozen policy is
/// scored exactly through finite-horizon dynamic programming.
fn train_gridworld(
    grid: &GridWorldSpec,
    spec: &EnvSpec,
    min_replay: usize,
    rng: &mut StreamRng,
) -> Result<TrainedBehavior> {
    const LR: f64 = 0.5;
    const GAMMA: f64 = 0.95;
    const EXPLORE: f64 = 0.3;
    let anchors = spec.anchors()?;
    let n = grid.n_cells();
    let mut q: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| 1e-3 * rng.random::<f64>())).collect();
    let greedy_of = |q: &[[f64; 4]]| -> Vec<usize> {
        q.iter().map(|row| (0..4).fold(0, |best, a| if row[a] > row[best] { a } else { best })).collect()
    };
    let mut env = super::GridWorld::new(grid.clone())?;
    let mut replay = Vec::new();
    let mut frozen: Option<(Vec<usize>, f64)> = None;
    for _ in 0..MAX_TRAINING_EPISODES {
        if frozen.is_some() && replay.len() >= min_replay {
            break;
        }
        let policy = match &frozen {
            Some((g, _)) => BehaviorPolicy::Tabular { greedy: g.clone(), epsilon: MEDIUM_EPSILON, grid: grid.clone() },
            None => BehaviorPolicy::Tabular { greedy: greedy_of(&q), epsilon: EXPLORE, grid: grid.clone() },
        };
        let start = replay.len();
        run_episode(spec, &mut env, &policy, rng.random(), rng, &mut replay)?;
        if frozen.is_some() {
            continue;
        }
        for t in &replay[start..] {
            let s = grid.cell_index(grid.cell_of(&t.state));
            let s2 = grid.cell_index(grid.cell_of(&t.next_state));
            let Action::Discrete(a) = t.action else { unreachable!() };
            let boot = if t.done { 0.0 } else { GAMMA * q[s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max) };
            q[s][a] += LR * (t.reward + boot - q[s][a]);
        }
        let greedy = greedy_of(&q);
        let score = anchors.normalize(grid.success_probability(&noisy_tabular(&greedy, MEDIUM_EPSILON)));
        if score >= MEDIUM_TARGET_SCORE {
            frozen = Some((greedy, score));
        }
    }
    let (greedy, score) = match frozen {
        Some(f) => f,
        None => {
            let g = greedy_of(&q);
            let s = anchors.normalize(grid.success_probability(&noisy_tabular(&g, MEDIUM_EPSILON)));
            log::warn!("gridworld behavior training stopped at score {s:.1} without reaching the target");
            (g, s)
        }
    };
    Ok(TrainedBehavior {
        policy: BehaviorPolicy::Tabular { greedy, epsilon: MEDIUM_EPSILON, grid: grid.clone() },
        replay,
        score,
    })
}

/// (1+1) hill climbing over the gains of a linear feedback controller.
fn train_pointmass(
    pm: &PointMassSpec,
    spec: &EnvSpec,
    min_replay: usize,
    rng: &mut StreamRng,
) -> Result<TrainedBehavior> {
    const EVAL_EPISODES: usize = 3;
    const STEP: f64 = 0.3;
    let anchors = spec.anchors()?;
    let mut env = super::PointMass::new(pm.clone())?;
    let mut replay = Vec::new();
    let policy_for = |kp: f64, kd: f64| BehaviorPolicy::Linear { kp, kd, epsilon: MEDIUM_EPSILON, goal: pm.goal };
    let mut evaluate = |kp: f64, kd: f64, rng: &mut StreamRng, replay: &mut Vec<Transition>| -> Result<f64> {
        let policy = policy_for(kp, kd);
        let mut total = 0.0;
        for _ in 0..EVAL_EPISODES {
            total += run_episode(spec, &mut env, &policy, rng.random(), rng, replay)?;
        }
        Ok(anchors.normalize(total / EVAL_EPISODES as f64))
    };
    let (mut kp, mut kd) = (0.0, 0.0);
    let mut best = evaluate(kp, kd, rng, &mut replay)?;
    let mut frozen = best >= MEDIUM_TARGET_SCORE;
    let mut iterations = 0;
    while !(frozen && replay.len() >= min_replay) {
        iterations += 1;
        if iterations > MAX_TRAINING_EPISODES {
            log::warn!("point-mass behavior training hit its iteration cap at score {best:.1}");
            break;
        }
        if frozen {
            evaluate(kp, kd, rng, &mut replay)?;
            continue;
        }
        let dp: f64 = rng.sample(StandardNormal);
        let dd: f64 = rng.sample(StandardNormal);
        let (ckp, ckd) = ((kp + STEP * dp).max(0.0), (kd + STEP * dd).max(0.0));
        let score = evaluate(ckp, ckd, rng, &mut replay)?;
        if score > best {
            kp = ckp;
            kd = ckd;
            best = score;
            frozen = best >= MEDIUM_TARGET_SCORE;
        }
    }
    Ok(TrainedBehavior { policy: policy_for(kp, kd), replay, score: best })
}
