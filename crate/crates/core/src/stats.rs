//! Small statistics helpers for cross-seed summaries.

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median with the usual even-length midpoint convention.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Outcome of a paired one-sided sign test of `treatment > control`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// P(W >= wins) under Binomial(wins + losses, 1/2). Ties are dropped;
    /// with no untied pairs the p-value is 1.
    pub p_value: f64,
}

pub fn sign_test(treatment: &[f64], control: &[f64]) -> SignTest {
    assert_eq!(treatment.len(), control.len(), "sign test needs paired samples");
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (t, c) in treatment.iter().zip(control) {
        if t > c {
            wins += 1;
        } else if t < c {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 { 1.0 } else { binomial_upper_tail(n, wins) };
    SignTest { wins, losses, ties, p_value }
}

/// P(X >= k) for X ~ Binomial(n, 1/2).
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    let mut total = 0.0;
    let mut coeff = 1.0f64; // C(n, 0)
    for i in 0..=n {
        if i >= k {
            total += coeff;
        }
        coeff = coeff * (n - i) as f64 / (i + 1) as f64;
    }
    total / 2f64.powi(n as i32)
}
