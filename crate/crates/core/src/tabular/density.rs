use ndarray::Array1;
use serde::Serialize;

use super::mdp::{TabularMdp, TabularPolicy};
use crate::{Error, Result};

/// `(1/T) sum_{t=1..T} Pr(s_t = s)` with `s_1 ~ p0`.
pub fn marginal_state_distribution(mdp: &TabularMdp, pi: &TabularPolicy, horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if pi.probs.dim() != mdp.r.dim() {
        return Err(Error::Dimension("policy does not match the MDP".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut dist: Array1<f64> = mdp.p0.clone();
    let mut total = Array1::<f64>::zeros(ns);
    for t in 0..horizon {
        total += &dist;
        if t + 1 == horizon {
            break;
        }
        let mut next = Array1::zeros(ns);
        for s in 0..ns {
            for a in 0..na {
                let w = dist[s] * pi.probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                for u in 0..ns {
                    next[u] += w * mdp.p[[s, a, u]];
                }
            }
        }
        dist = next;
    }
    Ok(total.iter().map(|x| x / horizon as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityPair {
    pub rho: Vec<f64>,
    pub target: Vec<f64>,
}

impl DensityPair {
    pub fn new(rho: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if rho.len() != target.len() || rho.is_empty() {
            return Err(Error::Dimension("densities must share a nonempty support".into()));
        }
        for (v, name) in [(&rho, "rho"), (&target, "target")] {
            let sum: f64 = v.iter().sum();
            if v.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("{name} is not a probability vector")));
            }
        }
        Ok(Self { rho, target })
    }
}

fn neg_x_log_x(x: f64) -> f64 {
    if x > 0.0 {
        -x * x.ln()
    } else {
        0.0
    }
}

/// `KL(rho || target)`.
pub fn smm_kl(pair: &DensityPair) -> Result<f64> {
    let mut kl = 0.0;
    for (&r, &p) in pair.rho.iter().zip(&pair.target) {
        if r > 0.0 {
            if p <= 0.0 {
                return Err(Error::InvalidArgument("target density is zero where rho is positive".into()));
            }
            kl += r * (r / p).ln();
        }
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub entropy: f64,
    pub term1: f64,
    pub term2: f64,
    pub holds: bool,
    /// States where `rho > target`.
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
}

/// Compare `H[rho]` with the split bound
/// `sum_{S1} -rho ln rho + sum_{S2} -p ln p`.
pub fn entropy_bound_check(pair: &DensityPair) -> BoundReport {
    let (mut s1, mut s2) = (Vec::new(), Vec::new());
    let (mut term1, mut term2) = (0.0, 0.0);
    for (s, (&r, &p)) in pair.rho.iter().zip(&pair.target).enumerate() {
        if r > p {
            s1.push(s);
            term1 += neg_x_log_x(r);
        } else {
            s2.push(s);
            term2 += neg_x_log_x(p);
        }
    }
    let entropy: f64 = pair.rho.iter().map(|&r| neg_x_log_x(r)).sum();
    BoundReport { entropy, term1, term2, holds: entropy <= term1 + term2 + 1e-12, s1, s2 }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub step: f64,
    pub mass_cap: Option<f64>,
    pub pairs: usize,
    pub holds: usize,
    /// A few violating pairs as `(rho, target, gap)` with gap `H - bound`.
    pub counterexamples: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl SweepReport {
    pub fn all_hold(&self) -> bool {
        self.holds == self.pairs
    }
}

/// Every ordered pair of points on the 3-state simplex grid with spacing
/// `1/divisions`, optionally restricted to masses `<= mass_cap`.
pub fn simplex_sweep(divisions: usize, mass_cap: Option<f64>) -> Result<SweepReport> {
    const KEEP: usize = 5;
    if divisions == 0 {
        return Err(Error::InvalidArgument("need at least one division".into()));
    }
    let cap = mass_cap.unwrap_or(f64::INFINITY);
    let mut points = Vec::new();
    for i in 0..=divisions {
        for j in 0..=divisions - i {
            let k = divisions - i - j;
            let p: Vec<f64> = [i, j, k].iter().map(|&c| c as f64 / divisions as f64).collect();
            if p.iter().all(|&x| x <= cap) {
                points.push(p);
            }
        }
    }
    let mut report = SweepReport { step: 1.0 / divisions as f64, mass_cap, pairs: 0, holds: 0, counterexamples: Vec::new() };
    for rho in &points {
        for target in &points {
            let pair = DensityPair { rho: rho.clone(), target: target.clone() };
            let b = entropy_bound_check(&pair);
            report.pairs += 1;
            if b.holds {
                report.holds += 1;
            } else if report.counterexamples.len() < KEEP {
                report.counterexamples.push((rho.clone(), target.clone(), b.entropy - b.term1 - b.term2));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn kl_examples() {
        let same = DensityPair::new(vec![0.2, 0.8], vec![0.2, 0.8]).unwrap();
        assert_eq!(smm_kl(&same).unwrap(), 0.0);
        let pair = DensityPair::new(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
        assert!((smm_kl(&pair).unwrap() - 2f64.ln()).abs() < 1e-15);
        let bad = DensityPair::new(vec![0.5, 0.5], vec![1.0, 0.0]).unwrap();
        assert!(smm_kl(&bad).is_err());
    }

    #[test]
    fn bound_degenerates_to_equality() {
        let p = DensityPair::new(vec![0.3, 0.3, 0.4], vec![0.3, 0.3, 0.4]).unwrap();
        let b = entropy_bound_check(&p);
        assert!(b.s1.is_empty() && b.holds);
        assert!((b.term2 - b.entropy).abs() < 1e-15);
    }

    #[test]
    fn known_counterexample() {
        let p = DensityPair::new(vec![0.9, 0.1], vec![0.95, 0.05]).unwrap();
        let b = entropy_bound_check(&p);
        assert_eq!(b.s1, vec![1]);
        assert!(!b.holds);
    }

    #[test]
    fn chain_visits_each_state_once() {
        let mut p = Array3::zeros((3, 1, 3));
        p[[0, 0, 1]] = 1.0;
        p[[1, 0, 2]] = 1.0;
        p[[2, 0, 2]] = 1.0;
        let mdp = TabularMdp::new(p, Array2::zeros((3, 1)), Array1::from(vec![1.0, 0.0, 0.0]), 0.9).unwrap();
        let pi = TabularPolicy::uniform(3, 1);
        let rho = marginal_state_distribution(&mdp, &pi, 3).unwrap();
        assert!(rho.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let long = marginal_state_distribution(&mdp, &pi, 10_000).unwrap();
        assert!(long[2] > 0.999);
    }
}
