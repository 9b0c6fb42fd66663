use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::envs::GridWorldSpec;
use crate::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    /// `p[[s, a, s']]`
    pub p: Array3<f64>,
    /// `r[[s, a]]`
    pub r: Array2<f64>,
    pub p0: Array1<f64>,
    pub gamma: f64,
}

fn check_distribution(v: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for x in v {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::InvalidArgument(format!("{what} has an invalid entry {x}")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Flat Dirichlet(1) sample.
fn simplex_point(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

impl TabularMdp {
    pub fn new(p: Array3<f64>, r: Array2<f64>, p0: Array1<f64>, gamma: f64) -> Result<Self> {
        let mdp = Self { p, r, p0, gamma };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn n_actions(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a, s2) = self.p.dim();
        if s == 0 || a == 0 || s2 != s || self.r.dim() != (s, a) || self.p0.len() != s {
            return Err(Error::Dimension("inconsistent tabular MDP shapes".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("rewards".into()));
        }
        for si in 0..s {
            for ai in 0..a {
                check_distribution(self.p.slice(ndarray::s![si, ai, ..]).iter().copied(), "transition row")?;
            }
        }
        check_distribution(self.p0.iter().copied(), "initial distribution")
    }

    /// Dense random MDP: Dirichlet transitions and start, rewards in [-1, 1].
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Array3::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                for (t, x) in simplex_point(n_states, rng).into_iter().enumerate() {
                    p[[s, a, t]] = x;
                }
            }
        }
        let r = Array2::from_shape_fn((n_states, n_actions), |_| rng.random_range(-1.0..1.0));
        let p0 = Array1::from(simplex_point(n_states, rng));
        Self::new(p, r, p0, gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    /// `probs[[s, a]]`
    pub probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for row in probs.rows() {
            check_distribution(row.iter().copied(), "policy row")?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut impl Rng) -> Self {
        let mut probs = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            for (a, x) in simplex_point(n_actions, rng).into_iter().enumerate() {
                probs[[s, a]] = x;
            }
        }
        Self { probs }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Self { probs }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.probs.iter().zip(other.probs.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Tabular form of a gridworld: one state per cell, reward 1 for entering the
/// goal, goal absorbing with zero reward.
pub fn gridworld_mdp(spec: &GridWorldSpec, gamma: f64) -> Result<TabularMdp> {
    spec.validate()?;
    let n = spec.n_cells();
    let goal = spec.cell_index(spec.goal);
    let mut p = Array3::zeros((n, 4, n));
    let mut r = Array2::zeros((n, 4));
    for s in 0..n {
        if s == goal {
            for a in 0..4 {
                p[[s, a, s]] = 1.0;
            }
            continue;
        }
        let c = spec.cell_at(s);
        for a in 0..4 {
            for b in 0..4 {
                let w = if a == b { 1.0 - spec.slip_prob } else { 0.0 } + spec.slip_prob / 4.0;
                let next = spec.cell_index(spec.successor(c, b));
                p[[s, a, next]] += w;
                if next == goal {
                    r[[s, a]] += w;
                }
            }
        }
    }
    let mut p0 = Array1::zeros(n);
    p0[spec.cell_index(spec.start)] = 1.0;
    TabularMdp::new(p, r, p0, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn random_mdps_are_valid() {
        let mut rng = stream(0, Stream::Sampling);
        for _ in 0..20 {
            let m = TabularMdp::random(rng.random_range(1..10), rng.random_range(1..5), 0.9, &mut rng).unwrap();
            m.validate().unwrap();
            TabularPolicy::new(TabularPolicy::random(m.n_states(), m.n_actions(), &mut rng).probs).unwrap();
        }
    }

    #[test]
    fn rejects_bad_rows_and_gamma() {
        let p = Array3::from_elem((1, 1, 1), 0.5);
        assert!(TabularMdp::new(p, Array2::zeros((1, 1)), Array1::ones(1), 0.5).is_err());
        let p = Array3::ones((1, 1, 1));
        assert!(TabularMdp::new(p, Array2::zeros((1, 1)), Array1::ones(1), 1.0).is_err());
        assert!(TabularPolicy::new(Array2::from_elem((1, 2), 0.6)).is_err());
    }

    #[test]
    fn gridworld_rows_and_rewards() {
        let spec = GridWorldSpec {
            width: 3,
            height: 1,
            walls: vec![],
            start: [0, 0],
            goal: [2, 0],
            max_steps: 5,
            slip_prob: 0.2,
        };
        let m = gridworld_mdp(&spec, 0.9).unwrap();
        // moving right from the middle hits the goal unless it slips elsewhere
        assert!((m.r[[1, 3]] - (0.8 + 0.05)).abs() < 1e-12);
        assert_eq!(m.r[[2, 3]], 0.0);
    }
}
