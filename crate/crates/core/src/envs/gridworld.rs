use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, Anchors, Environment, Transition};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// `[x, y]` grid coordinates.
pub type Cell = [usize; 2];

/// Moves for actions 0..4: up, down, left, right.
const MOVES: [(i64, i64); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<Cell>,
    pub start: Cell,
    pub goal: Cell,
    pub max_steps: usize,
    /// Probability that the chosen action is replaced by a uniform one.
    #[serde(default)]
    pub slip_prob: f64,
}

impl GridWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width == 0 || self.height == 0 {
            return bad("gridworld must have positive width and height".into());
        }
        for (name, c) in [("start", self.start), ("goal", self.goal)] {
            if c[0] >= self.width || c[1] >= self.height {
                return bad(format!("{name} {c:?} outside the grid"));
            }
            if self.walls.contains(&c) {
                return bad(format!("{name} {c:?} is a wall"));
            }
        }
        if self.start == self.goal {
            return bad("start and goal coincide".into());
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return bad(format!("slip_prob {} outside [0, 1]", self.slip_prob));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        c[1] * self.width + c[0]
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        [index % self.width, index / self.width]
    }

    /// Normalised `[x, y]` observation of a cell.
    pub fn observe(&self, c: Cell) -> Vec<f64> {
        let norm = |v: usize, extent: usize| if extent > 1 { v as f64 / (extent - 1) as f64 } else { 0.0 };
        vec![norm(c[0], self.width), norm(c[1], self.height)]
    }

    /// Cell for an observation produced by [`observe`](Self::observe).
    pub fn cell_of(&self, obs: &[f64]) -> Cell {
        let un = |v: f64, extent: usize| if extent > 1 { (v * (extent - 1) as f64).round() as usize } else { 0 };
        [un(obs[0], self.width), un(obs[1], self.height)]
    }

    /// Deterministic successor; walls and borders block.
    pub fn successor(&self, c: Cell, action: usize) -> Cell {
        let (dx, dy) = MOVES[action];
        let nx = c[0] as i64 + dx;
        let ny = c[1] as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            return c;
        }
        let n = [nx as usize, ny as usize];
        if self.walls.contains(&n) {
            c
        } else {
            n
        }
    }

    /// Probability of reaching the goal from `start` within `max_steps` under a
    /// stationary policy given as per-cell action probabilities.
    pub fn success_probability(&self, policy: &[[f64; 4]]) -> f64 {
        self.finite_horizon(|_, values| {
            let mut out = vec![0.0; self.n_cells()];
            for (s, o) in out.iter_mut().enumerate() {
                *o = (0..4).map(|a| policy[s][a] * values[s][a]).sum();
            }
            out
        })
    }

    /// Exact anchors: uniform-random policy and optimal policy success rates.
    pub fn anchors(&self) -> Anchors {
        let uniform = vec![[0.25; 4]; self.n_cells()];
        let random = self.success_probability(&uniform);
        let expert = self.finite_horizon(|_, values| {
            values.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect()
        });
        Anchors { random, expert }
    }

    /// Backward induction over the horizon. `combine` maps the per-(cell,
    /// action) continuation values to per-cell values for one stage.
    fn finite_horizon(&self, combine: impl Fn(usize, &[[f64; 4]]) -> Vec<f64>) -> f64 {
        let n = self.n_cells();
        let goal = self.cell_index(self.goal);
        let mut v = vec![0.0; n];
        for t in 0..self.max_steps {
            // value of landing in a cell: 1 at the goal, else continuation
            let landing: Vec<f64> = (0..n).map(|s| if s == goal { 1.0 } else { v[s] }).collect();
            let mut q = vec![[0.0; 4]; n];
            for (s, qs) in q.iter_mut().enumerate() {
                let c = self.cell_at(s);
                let direct: [f64; 4] =
                    std::array::from_fn(|a| landing[self.cell_index(self.successor(c, a))]);
                let slipped = direct.iter().sum::<f64>() / 4.0;
                for a in 0..4 {
                    qs[a] = (1.0 - self.slip_prob) * direct[a] + self.slip_prob * slipped;
                }
            }
            v = combine(t, &q);
            v[goal] = 0.0;
        }
        v[self.cell_index(self.start)]
    }
}

/// Delayed-reward gridworld.
#[derive(Debug, Clone)]
pub struct GridWorld {
    spec: GridWorldSpec,
    walls: HashSet<Cell>,
    pos: Cell,
    steps: usize,
    running: bool,
    rng: StreamRng,
}

impl GridWorld {
    pub fn new(spec: GridWorldSpec) -> Result<Self> {
        spec.validate()?;
        let walls = spec.walls.iter().copied().collect();
        let pos = spec.start;
        Ok(Self { spec, walls, pos, steps: 0, running: false, rng: StreamRng::seed_from_u64(0) })
    }

    pub fn spec(&self) -> &GridWorldSpec {
        &self.spec
    }

    pub fn position(&self) -> Cell {
        self.pos
    }
}

impl Environment for GridWorld {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(4)
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = StreamRng::seed_from_u64(seed);
        self.pos = self.spec.start;
        self.steps = 0;
        self.running = true;
        self.spec.observe(self.pos)
    }

    fn step(&mut self, action: &Action) -> Result<Transition> {
        if !self.running {
            return Err(Error::Protocol("step called on a finished or unreset gridworld".into()));
        }
        let mut a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            other => return Err(Error::InvalidArgument(format!("gridworld action {other:?} not in 0..4"))),
        };
        if self.spec.slip_prob > 0.0 && self.rng.random::<f64>() < self.spec.slip_prob {
            a = self.rng.random_range(0..4);
        }
        debug_assert!(!self.walls.contains(&self.pos));
        let state = self.spec.observe(self.pos);
        let next = self.spec.successor(self.pos, a);
        self.pos = next;
        self.steps += 1;
        let done = next == self.spec.goal;
        let truncated = !done && self.steps >= self.spec.max_steps;
        self.running = !(done || truncated);
        Ok(Transition {
            state,
            action: action.clone(),
            reward: if done { 1.0 } else { 0.0 },
            next_state: self.spec.observe(next),
            done,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> GridWorldSpec {
        GridWorldSpec {
            width: 3,
            height: 2,
            walls: vec![[1, 1]],
            start: [0, 0],
            goal: [2, 0],
            max_steps: 10,
            slip_prob: 0.0,
        }
    }

    #[test]
    fn reset_returns_start_coordinates() {
        let mut env = GridWorld::new(corridor()).unwrap();
        assert_eq!(env.reset(123), vec![0.0, 0.0]);
        assert_eq!(env.reset(u64::MAX), vec![0.0, 0.0]);
    }

    #[test]
    fn reaching_goal_pays_one_and_ends() {
        let mut env = GridWorld::new(corridor()).unwrap();
        env.reset(0);
        let t = env.step(&Action::Discrete(3)).unwrap();
        assert_eq!(t.reward, 0.0);
        assert!(!t.done);
        let t = env.step(&Action::Discrete(3)).unwrap();
        assert_eq!(t.reward, 1.0);
        assert!(t.done);
        assert_eq!(t.next_state, vec![1.0, 0.0]);
        assert!(matches!(env.step(&Action::Discrete(0)), Err(Error::Protocol(_))));
    }

    #[test]
    fn walls_block_without_reward() {
        let mut env = GridWorld::new(corridor()).unwrap();
        env.reset(0);
        env.step(&Action::Discrete(3)).unwrap(); // now at [1, 0]
        let t = env.step(&Action::Discrete(0)).unwrap(); // [1, 1] is a wall
        assert_eq!(t.state, t.next_state);
        assert_eq!(t.reward, 0.0);
        // the border blocks too
        let t = env.step(&Action::Discrete(1)).unwrap();
        assert_eq!(t.state, t.next_state);
    }

    #[test]
    fn episode_truncates_at_max_steps() {
        let mut env = GridWorld::new(corridor()).unwrap();
        env.reset(0);
        let mut last = None;
        for _ in 0..10 {
            last = Some(env.step(&Action::Discrete(2)).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.done);
        assert!(env.step(&Action::Discrete(2)).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = corridor();
        s.goal = s.start;
        assert!(s.validate().is_err());
        let mut s = corridor();
        s.walls.push([2, 0]);
        assert!(s.validate().is_err());
        let mut s = corridor();
        s.slip_prob = 1.5;
        assert!(s.validate().is_err());
        let mut s = corridor();
        s.max_steps = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn exact_anchors_on_a_corridor() {
        // 1x3 corridor, goal two cells to the right, horizon 2: only "right,
        // right" succeeds for the random policy -> (1/4)^2.
        let spec = GridWorldSpec {
            width: 3,
            height: 1,
            walls: vec![],
            start: [0, 0],
            goal: [2, 0],
            max_steps: 2,
            slip_prob: 0.0,
        };
        let a = spec.anchors();
        assert!((a.random - 1.0 / 16.0).abs() < 1e-15);
        assert_eq!(a.expert, 1.0);
    }

    #[test]
    fn anchors_match_monte_carlo_under_slip() {
        let mut spec = corridor();
        spec.slip_prob = 0.3;
        spec.max_steps = 4;
        let exact = spec.anchors();
        // Monte-Carlo the random policy
        let mut env = GridWorld::new(spec).unwrap();
        let mut rng = crate::rng::stream(1, crate::rng::Stream::Eval);
        let episodes = 40_000;
        let mut wins = 0;
        for e in 0..episodes {
            env.reset(e);
            loop {
                let t = env.step(&Action::Discrete(rng.random_range(0..4))).unwrap();
                if t.done {
                    wins += 1;
                }
                if t.ends_episode() {
                    break;
                }
            }
        }
        let p = exact.random;
        let est = wins as f64 / episodes as f64;
        let sigma = (p * (1.0 - p) / episodes as f64).sqrt();
        assert!((est - p).abs() < 4.0 * sigma, "mc {est} exact {p}");
    }
}
