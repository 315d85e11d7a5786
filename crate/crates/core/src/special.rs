//! Small special-function helpers not covered by `statrs`.

/// Trigamma function, the second derivative of `ln Gamma`.
///
/// Recurrence to shift the argument above 6, then the standard asymptotic
/// expansion with Bernoulli-number coefficients; absolute accuracy is well
/// below 1e-10 on the positive axis, which is all the likelihood
/// derivatives require.
pub fn trigamma(x: f64) -> f64 {
    assert!(x > 0.0, "trigamma defined here for positive arguments only");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // psi'(x) ~ 1/x + 1/(2x^2) + sum B_{2n} / x^{2n+1}
    let series = inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 - inv2 / 30.0)));
    acc + series
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_known_values() {
        // trigamma(1) = pi^2/6, trigamma(0.5) = pi^2/2
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        assert_relative_eq!(trigamma(1.0), pi2 / 6.0, epsilon = 1e-10);
        assert_relative_eq!(trigamma(0.5), pi2 / 2.0, epsilon = 1e-10);
        assert_relative_eq!(trigamma(10.0), 0.105166335681686, epsilon = 1e-10);
    }

    #[test]
    fn matches_digamma_finite_difference() {
        for &x in &[0.3, 1.7, 4.2, 25.0] {
            let h = 1e-5;
            let fd = (statrs::function::gamma::digamma(x + h)
                - statrs::function::gamma::digamma(x - h))
                / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd, max_relative = 1e-6);
        }
    }
}
