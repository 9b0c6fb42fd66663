use crate::{Error, Result};

/// Digamma function for positive arguments.
///
/// Shifts the argument above 10 with `psi(x) = psi(x + 1) - 1/x`, then uses
/// the asymptotic expansion in `1/x^2`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!("digamma needs a positive finite argument, got {x}")));
    }
    let mut shift = 0.0;
    let mut x = x;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli coefficients B_2k / (2k)
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(shift + x.ln() - 0.5 * inv - series)
}
