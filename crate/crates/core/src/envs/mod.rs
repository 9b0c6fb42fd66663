//! Desk-scale environments and offline datasets.
//!
//! [`GridWorld`] is the delayed-reward task: the only reward is `+1` on
//! entering the goal. [`PointMass`] is the continuous-control task with a
//! dense negative distance reward. Both expose real-vector observations so
//! the same networks and entropy estimators serve either.

mod behavior;
mod dataset;
mod gridworld;
mod pointmass;

pub use behavior::{Behavior, BehaviorPolicy};
pub use dataset::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetMeta, DATASET_SCHEMA_VERSION};
pub use gridworld::{GridWorld, GridWorldSpec};
pub use pointmass::{PointMass, PointMassSpec};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Shape of an action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "n", rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete(usize),
    /// Box `[-1, 1]^n`.
    Continuous(usize),
}

impl ActionSpace {
    /// Number of discrete actions or continuous action dimensions.
    pub fn size(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// One environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Terminal: the bootstrap term is masked.
    pub done: bool,
    /// The episode was cut by the step limit (or by the end of a dataset).
    /// Not terminal for bootstrapping, but an episode boundary.
    pub truncated: bool,
}

impl Transition {
    /// Whether this transition closes its episode.
    pub fn ends_episode(&self) -> bool {
        self.done || self.truncated
    }
}

/// A resettable, single-owner environment.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn max_steps(&self) -> usize;
    /// Reset to an initial state. Identical seeds give identical episodes
    /// given identical actions.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advance one step. Fails when called after the episode ended or
    /// before the first reset.
    fn step(&mut self, action: &Action) -> Result<Transition>;
}

/// Random-policy and expert returns used to normalise scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub random: f64,
    pub expert: f64,
}

impl Anchors {
    /// `100 * (score - random) / (expert - random)`.
    pub fn normalize(&self, score: f64) -> f64 {
        100.0 * (score - self.random) / (self.expert - self.random)
    }
}

/// Serializable description of any supported environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Gridworld(GridWorldSpec),
    Pointmass(PointMassSpec),
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::Gridworld(g) => g.validate(),
            EnvSpec::Pointmass(p) => p.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::Gridworld(g) => Box::new(GridWorld::new(g.clone())?),
            EnvSpec::Pointmass(p) => Box::new(PointMass::new(p.clone())?),
        })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvSpec::Gridworld(_) => 2,
            EnvSpec::Pointmass(_) => 4,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            EnvSpec::Gridworld(_) => ActionSpace::Discrete(4),
            EnvSpec::Pointmass(_) => ActionSpace::Continuous(2),
        }
    }

    /// Stable identifier: kind plus a digest of the full spec.
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(self).expect("env spec serializes");
        let digest = Sha256::digest(&json);
        let short: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
        let kind = match self {
            EnvSpec::Gridworld(_) => "gridworld",
            EnvSpec::Pointmass(_) => "pointmass",
        };
        format!("{kind}-{short}")
    }

    /// Score anchors for this environment. Gridworld anchors are exact
    /// (finite-horizon dynamic programming); point-mass anchors are fixed-seed
    /// Monte-Carlo estimates of a uniform-random and a hand-tuned PD policy.
    pub fn anchors(&self) -> Result<Anchors> {
        let anchors = match self {
            EnvSpec::Gridworld(g) => g.anchors(),
            EnvSpec::Pointmass(p) => p.anchors()?,
        };
        if !(anchors.expert > anchors.random) {
            return Err(Error::InvalidArgument(format!(
                "expert anchor {} does not exceed random anchor {}",
                anchors.expert, anchors.random
            )));
        }
        Ok(anchors)
    }
}
