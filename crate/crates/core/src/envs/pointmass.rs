use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, Anchors, Environment, Transition};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

fn default_start() -> [f64; 2] {
    [-0.5, -0.5]
}
fn default_goal() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_dt() -> f64 {
    0.1
}
fn default_goal_radius() -> f64 {
    0.1
}
fn default_max_steps() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_init_noise() -> f64 {
    0.05
}
fn default_max_speed() -> f64 {
    1.0
}

/// Point mass in the `[-1, 1]^2` arena, accelerated by a clipped 2-d action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_start")]
    pub start: [f64; 2],
    #[serde(default = "default_goal")]
    pub goal: [f64; 2],
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Dense `-distance` reward; otherwise `+1` on reaching the goal.
    #[serde(default = "default_true")]
    pub dense: bool,
    /// Standard deviation of the Gaussian start-position jitter.
    #[serde(default = "default_init_noise")]
    pub init_noise: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
}

impl Default for PointMassSpec {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            start: default_start(),
            goal: default_goal(),
            goal_radius: default_goal_radius(),
            max_steps: default_max_steps(),
            dense: true,
            init_noise: default_init_noise(),
            max_speed: default_max_speed(),
        }
    }
}

const ARENA: f64 = 1.0;

impl PointMassSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.goal_radius > 0.0) {
            return bad("goal_radius must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.init_noise >= 0.0) || !(self.max_speed > 0.0) {
            return bad("init_noise must be nonnegative and max_speed positive");
        }
        let inside = |p: [f64; 2]| p.iter().all(|v| v.abs() <= ARENA);
        if !inside(self.start) || !inside(self.goal) {
            return bad("start and goal must lie in the [-1, 1]^2 arena");
        }
        Ok(())
    }

    fn distance_to_goal(&self, p: [f64; 2]) -> f64 {
        ((p[0] - self.goal[0]).powi(2) + (p[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Proportional-derivative controller used as the expert anchor.
    pub fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        (0..2)
            .map(|i| (6.0 * (self.goal[i] - state[i]) - 3.0 * state[2 + i]).clamp(-1.0, 1.0))
            .collect()
    }

    /// Fixed-seed Monte-Carlo anchors (200 episodes each).
    pub fn anchors(&self) -> Result<Anchors> {
        const EPISODES: u64 = 200;
        let mut env = PointMass::new(self.clone())?;
        let mut rng = rng::stream(0xA11C, rng::Stream::Eval);
        let mut random = 0.0;
        let mut expert = 0.0;
        for e in 0..EPISODES {
            random += rollout(&mut env, e, |_| {
                Action::Continuous(vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
            })?;
            expert += rollout(&mut env, e, |s| Action::Continuous(self.expert_action(s)))?;
        }
        Ok(Anchors { random: random / EPISODES as f64, expert: expert / EPISODES as f64 })
    }
}

fn rollout(env: &mut PointMass, seed: u64, mut policy: impl FnMut(&[f64]) -> Action) -> Result<f64> {
    let mut s = env.reset(seed);
    let mut ret = 0.0;
    loop {
        let t = env.step(&policy(&s))?;
        ret += t.reward;
        if t.ends_episode() {
            return Ok(ret);
        }
        s = t.next_state;
    }
}

/// Dense-reward continuous navigation task.
#[derive(Debug, Clone)]
pub struct PointMass {
    spec: PointMassSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
    running: bool,
}

impl PointMass {
    pub fn new(spec: PointMassSpec) -> Result<Self> {
        spec.validate()?;
        let pos = spec.start;
        Ok(Self { spec, pos, vel: [0.0; 2], steps: 0, running: false })
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Environment for PointMass {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = StreamRng::seed_from_u64(seed);
        for i in 0..2 {
            let jitter: f64 = rng.sample(StandardNormal);
            self.pos[i] = (self.spec.start[i] + self.spec.init_noise * jitter).clamp(-ARENA, ARENA);
        }
        self.vel = [0.0; 2];
        self.steps = 0;
        self.running = true;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<Transition> {
        if !self.running {
            return Err(Error::Protocol("step called on a finished or unreset point mass".into()));
        }
        let raw = match action {
            Action::Continuous(a) if a.len() == 2 => a,
            other => return Err(Error::InvalidArgument(format!("point-mass action {other:?} is not 2-d"))),
        };
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point-mass action".into()));
        }
        let state = self.observe();
        let dt = self.spec.dt;
        for i in 0..2 {
            let acc = raw[i].clamp(-1.0, 1.0);
            self.vel[i] = (self.vel[i] + acc * dt).clamp(-self.spec.max_speed, self.spec.max_speed);
            let p = self.pos[i] + self.vel[i] * dt;
            if p.abs() > ARENA {
                self.pos[i] = p.clamp(-ARENA, ARENA);
                self.vel[i] = 0.0;
            } else {
                self.pos[i] = p;
            }
        }
        self.steps += 1;
        let dist = self.spec.distance_to_goal(self.pos);
        let done = dist <= self.spec.goal_radius;
        let reward = if self.spec.dense {
            -dist
        } else if done {
            1.0
        } else {
            0.0
        };
        let truncated = !done && self.steps >= self.spec.max_steps;
        self.running = !(done || truncated);
        Ok(Transition { state, action: action.clone(), reward, next_state: self.observe(), done, truncated })
    }
}
