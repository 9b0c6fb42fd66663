use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One descent step. Rejects non-finite gradients without touching
    /// either the parameters or the moments.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer sized for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.3, -4.0, 1e-2]).unwrap();
        for (after, (before, sign)) in p.iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
            assert!((before - after - sign * 1e-3).abs() < 1e-6, "{after}");
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut opt = AdamState::new(2, 0.1);
        let mut p = vec![1.0, 2.0];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut opt = AdamState::new(2, 0.1);
        let mut p = vec![1.0, 2.0];
        assert!(matches!(opt.step(&mut p, &[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.t, 0);
        assert!(opt.step(&mut p, &[1.0]).is_err());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = AdamState::new(2, 0.05);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
