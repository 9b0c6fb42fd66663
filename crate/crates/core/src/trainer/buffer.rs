use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Actions, Batch};
use crate::envs::{Action, ActionSpace, Dataset, Transition};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Offline,
    Online,
}

/// FIFO ring of transitions from one source, each with a reference return
/// (discounted Monte-Carlo return-to-go of the collecting policy).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub source: Source,
    capacity: usize,
    items: Vec<Transition>,
    reference: Vec<f64>,
    /// Slot the next push overwrites once full.
    cursor: usize,
    /// Total pushes ever made.
    pushed: u64,
    gamma: f64,
    /// `(insertion number, discount weight)` of the open episode's entries.
    open_episode: Vec<(u64, f64)>,
}

impl ReplayBuffer {
    pub fn new(source: Source, capacity: usize, gamma: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            source,
            capacity,
            items: Vec::new(),
            reference: Vec::new(),
            cursor: 0,
            pushed: 0,
            gamma,
            open_episode: Vec::new(),
        })
    }

    /// Offline buffer holding a whole dataset with its returns-to-go.
    pub fn from_dataset(ds: &Dataset, gamma: f64) -> Result<Self> {
        ds.validate()?;
        let mut buf = Self::new(Source::Offline, ds.len(), gamma)?;
        buf.reference = ds.returns_to_go(gamma);
        buf.items = ds.transitions.clone();
        buf.pushed = ds.len() as u64;
        Ok(buf)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn get(&self, i: usize) -> (&Transition, f64) {
        (&self.items[i], self.reference[i])
    }

    fn slot_of(&self, insertion: u64) -> Option<usize> {
        // still resident if among the last `capacity` insertions
        if self.pushed - insertion > self.capacity as u64 {
            return None;
        }
        Some((insertion % self.capacity as u64) as usize)
    }

    /// Append, evicting the oldest entry when full. The reference return of
    /// every resident entry of the current episode is extended by this reward.
    pub fn push(&mut self, t: Transition) {
        let insertion = self.pushed;
        let slot = (insertion % self.capacity as u64) as usize;
        if self.items.len() < self.capacity {
            self.items.push(t);
            self.reference.push(0.0);
        } else {
            self.items[slot] = t;
            self.reference[slot] = 0.0;
        }
        self.cursor = (slot + 1) % self.capacity;
        self.pushed += 1;

        let reward = self.items[slot].reward;
        let ends = self.items[slot].ends_episode();
        self.open_episode.push((insertion, 1.0));
        for k in 0..self.open_episode.len() {
            let (ins, w) = self.open_episode[k];
            if let Some(s) = self.slot_of(ins) {
                self.reference[s] += w * reward;
            }
            self.open_episode[k].1 = w * self.gamma;
        }
        if ends {
            self.open_episode.clear();
        }
    }

    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.is_empty() && n > 0 {
            return Err(Error::InvalidArgument("sampling from an empty buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn states(&self, indices: &[usize], state_dim: usize) -> Array2<f64> {
        Array2::from_shape_fn((indices.len(), state_dim), |(r, c)| self.items[indices[r]].state[c])
    }
}

/// Assemble a batch from `(buffer, index)` picks, tagging each row's source.
pub fn build_batch(
    picks: &[(&ReplayBuffer, usize)],
    state_dim: usize,
    space: ActionSpace,
) -> Result<(Batch, Vec<Source>)> {
    let n = picks.len();
    let t = |r: usize| picks[r].0.get(picks[r].1).0;
    let states = Array2::from_shape_fn((n, state_dim), |(r, c)| t(r).state[c]);
    let next_states = Array2::from_shape_fn((n, state_dim), |(r, c)| t(r).next_state[c]);
    let actions = match space {
        ActionSpace::Discrete(_) => Actions::Discrete(
            (0..n)
                .map(|r| match &t(r).action {
                    Action::Discrete(a) => Ok(*a),
                    Action::Continuous(_) => Err(Error::Dimension("continuous action in a discrete buffer".into())),
                })
                .collect::<Result<_>>()?,
        ),
        ActionSpace::Continuous(d) => {
            let mut a = Array2::zeros((n, d));
            for r in 0..n {
                match &t(r).action {
                    Action::Continuous(v) if v.len() == d => a.row_mut(r).assign(&ndarray::ArrayView1::from(v)),
                    _ => return Err(Error::Dimension("action does not fit the continuous space".into())),
                }
            }
            Actions::Continuous(a)
        }
    };
    let batch = Batch {
        states,
        actions,
        rewards: (0..n).map(|r| t(r).reward).collect(),
        next_states,
        dones: (0..n).map(|r| t(r).done).collect(),
        reference: Some((0..n).map(|r| picks[r].0.get(picks[r].1).1).collect()),
    };
    Ok((batch, picks.iter().map(|(b, _)| b.source).collect()))
}
