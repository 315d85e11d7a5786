//! Pointwise parametric families, link functions, and analytic derivatives
//! of the log-likelihood with respect to the additive predictors.
//!
//! All families use a mean-first parameterization: the first distributional
//! parameter is the location coupled to the latent processes. Positive
//! parameters use a log link, probabilities a logit link, and the Gaussian
//! mean the identity. The negative binomial is parameterized by
//! `(mean, size)` so that `Var = mean + mean^2/size`; the Gamma by
//! `(mean, shape)` so that `Var = mean^2/shape`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::special::trigamma;

#[derive(Debug, Error)]
pub enum FamilyError {
    #[error("unknown family name `{0}`")]
    UnknownName(String),
    #[error("observation y={y} outside the support of the {family} family")]
    Support { family: &'static str, y: f64 },
    #[error("parameter {index} = {value} outside the parameter space of the {family} family")]
    Parameter {
        family: &'static str,
        index: usize,
        value: f64,
    },
}

/// Link function mapping an additive predictor to a distributional parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl Link {
    /// theta = h(eta)
    pub fn apply(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    /// eta = h^{-1}(theta)
    pub fn invert(self, theta: f64) -> f64 {
        match self {
            Link::Identity => theta,
            Link::Log => theta.ln(),
            Link::Logit => (theta / (1.0 - theta)).ln(),
        }
    }
}

/// Log-likelihood and its predictor derivatives at one scalar observation.
#[derive(Debug, Clone)]
pub struct PredictorDerivatives {
    pub loglik: f64,
    /// d loglik / d eta_r per distributional parameter.
    pub score: Vec<f64>,
    /// d^2 loglik / d eta_r^2 per distributional parameter.
    pub hess: Vec<f64>,
}

/// A pointwise parametric distribution for one functional dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bernoulli,
    Poisson,
    Gaussian,
    #[serde(rename = "negbinomial")]
    NegBinomial,
    Gamma,
}

impl Family {
    pub fn from_name(name: &str) -> Result<Self, FamilyError> {
        match name {
            "bernoulli" => Ok(Family::Bernoulli),
            "poisson" => Ok(Family::Poisson),
            "gaussian" => Ok(Family::Gaussian),
            "negbinomial" => Ok(Family::NegBinomial),
            "gamma" => Ok(Family::Gamma),
            other => Err(FamilyError::UnknownName(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::Gaussian => "gaussian",
            Family::NegBinomial => "negbinomial",
            Family::Gamma => "gamma",
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Family::Bernoulli | Family::Poisson => 1,
            Family::Gaussian | Family::NegBinomial | Family::Gamma => 2,
        }
    }

    pub fn links(&self) -> &'static [Link] {
        match self {
            Family::Bernoulli => &[Link::Logit],
            Family::Poisson => &[Link::Log],
            Family::Gaussian => &[Link::Identity, Link::Log],
            Family::NegBinomial => &[Link::Log, Link::Log],
            Family::Gamma => &[Link::Log, Link::Log],
        }
    }

    /// Validate that `y` lies in the family's support.
    pub fn check_support(&self, y: f64) -> Result<(), FamilyError> {
        let ok = y.is_finite()
            && match self {
                Family::Bernoulli => y == 0.0 || y == 1.0,
                Family::Poisson | Family::NegBinomial => y >= 0.0 && y.fract() == 0.0,
                Family::Gaussian => true,
                Family::Gamma => y > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(FamilyError::Support {
                family: self.name(),
                y,
            })
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), FamilyError> {
        let valid = |index: usize, value: f64, ok: bool| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(FamilyError::Parameter {
                    family: self.name(),
                    index,
                    value,
                })
            }
        };
        assert_eq!(theta.len(), self.n_params(), "parameter tuple length");
        match self {
            Family::Bernoulli => valid(0, theta[0], theta[0] > 0.0 && theta[0] < 1.0),
            Family::Poisson => valid(0, theta[0], theta[0] > 0.0),
            Family::Gaussian => {
                valid(0, theta[0], true)?;
                valid(1, theta[1], theta[1] > 0.0)
            }
            Family::NegBinomial | Family::Gamma => {
                valid(0, theta[0], theta[0] > 0.0)?;
                valid(1, theta[1], theta[1] > 0.0)
            }
        }
    }

    /// Log density/mass at `y` for parameters on their natural scale.
    pub fn logpdf(&self, y: f64, theta: &[f64]) -> Result<f64, FamilyError> {
        self.check_support(y)?;
        self.check_theta(theta)?;
        Ok(match self {
            Family::Bernoulli => {
                let p = theta[0];
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            }
            Family::Poisson => {
                let lambda = theta[0];
                y * lambda.ln() - lambda - ln_gamma(y + 1.0)
            }
            Family::Gaussian => {
                let (mu, sd) = (theta[0], theta[1]);
                let z = (y - mu) / sd;
                -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z
            }
            Family::NegBinomial => {
                let (mu, size) = (theta[0], theta[1]);
                ln_gamma(y + size) - ln_gamma(size) - ln_gamma(y + 1.0)
                    + size * (size / (size + mu)).ln()
                    + y * (mu / (size + mu)).ln()
            }
            Family::Gamma => {
                let (mu, shape) = (theta[0], theta[1]);
                shape * (shape / mu).ln() - ln_gamma(shape) + (shape - 1.0) * y.ln()
                    - shape * y / mu
            }
        })
    }

    /// Log-likelihood as a function of the additive predictors.
    ///
    /// `lgy1` carries the observation-constant `ln Gamma(y + 1)` so callers
    /// on hot paths can precompute it; pass `ln_gamma(y + 1)` otherwise.
    #[inline]
    pub(crate) fn ll_eta(&self, y: f64, lgy1: f64, eta: [f64; 2]) -> f64 {
        match self {
            Family::Bernoulli => y * eta[0] - softplus(eta[0]),
            Family::Poisson => y * eta[0] - eta[0].exp() - lgy1,
            Family::Gaussian => {
                let z = (y - eta[0]) * (-eta[1]).exp();
                -0.5 * (2.0 * std::f64::consts::PI).ln() - eta[1] - 0.5 * z * z
            }
            Family::NegBinomial => {
                let size = eta[1].exp();
                // ln(size + mu) computed stably on the eta scale
                let lse = eta[1] + softplus(eta[0] - eta[1]);
                ln_gamma(y + size) - ln_gamma(size) - lgy1 + size * (eta[1] - lse)
                    + y * (eta[0] - lse)
            }
            Family::Gamma => {
                let shape = eta[1].exp();
                shape * (eta[1] - eta[0]) - ln_gamma(shape) + (shape - 1.0) * y.ln()
                    - shape * y * (-eta[0]).exp()
            }
        }
    }

    /// Score and negated-curvature pair `(dl/deta_r, d2l/deta_r^2)` for one
    /// distributional parameter.
    #[inline]
    pub(crate) fn sh_eta(&self, y: f64, eta: [f64; 2], r: usize) -> (f64, f64) {
        match (self, r) {
            (Family::Bernoulli, 0) => {
                let p = Link::Logit.apply(eta[0]);
                (y - p, -p * (1.0 - p))
            }
            (Family::Poisson, 0) => {
                let lambda = eta[0].exp();
                (y - lambda, -lambda)
            }
            (Family::Gaussian, 0) => {
                let inv_var = (-2.0 * eta[1]).exp();
                ((y - eta[0]) * inv_var, -inv_var)
            }
            (Family::Gaussian, 1) => {
                let z2 = (y - eta[0]) * (y - eta[0]) * (-2.0 * eta[1]).exp();
                (z2 - 1.0, -2.0 * z2)
            }
            (Family::NegBinomial, 0) => {
                let (mu, size) = (eta[0].exp(), eta[1].exp());
                let denom = size + mu;
                (
                    size * (y - mu) / denom,
                    -mu * size * (size + y) / (denom * denom),
                )
            }
            (Family::NegBinomial, 1) => {
                let (mu, size) = (eta[0].exp(), eta[1].exp());
                let denom = size + mu;
                let dl_dsize = digamma(y + size) - digamma(size) + (size / denom).ln() + 1.0
                    - (size + y) / denom;
                let d2l_dsize2 = trigamma(y + size) - trigamma(size) + 1.0 / size - 1.0 / denom
                    - (mu - y) / (denom * denom);
                (size * dl_dsize, size * dl_dsize + size * size * d2l_dsize2)
            }
            (Family::Gamma, 0) => {
                let (mu, shape) = (eta[0].exp(), eta[1].exp());
                (shape * (y - mu) / mu, -shape * y / mu)
            }
            (Family::Gamma, 1) => {
                let (mu, shape) = (eta[0].exp(), eta[1].exp());
                let dl_dshape = (shape / mu).ln() + 1.0 - digamma(shape) + y.ln() - y / mu;
                let d2l_dshape2 = 1.0 / shape - trigamma(shape);
                (
                    shape * dl_dshape,
                    shape * dl_dshape + shape * shape * d2l_dshape2,
                )
            }
            _ => unreachable!("parameter index out of range for {}", self.name()),
        }
    }

    /// Cumulative distribution function at `y` for parameters on their
    /// natural scale (used by randomized quantile residuals). For discrete
    /// families this is `P(Y <= y)`.
    pub fn cdf(&self, y: f64, theta: &[f64]) -> Result<f64, FamilyError> {
        self.check_theta(theta)?;
        use statrs::function::beta::beta_reg;
        use statrs::function::gamma::{gamma_lr, gamma_ur};
        Ok(match self {
            Family::Bernoulli => {
                if y < 0.0 {
                    0.0
                } else if y < 1.0 {
                    1.0 - theta[0]
                } else {
                    1.0
                }
            }
            Family::Poisson => {
                if y < 0.0 {
                    0.0
                } else {
                    gamma_ur(y.floor() + 1.0, theta[0])
                }
            }
            Family::Gaussian => {
                let z = (y - theta[0]) / (theta[1] * std::f64::consts::SQRT_2);
                0.5 * (1.0 + statrs::function::erf::erf(z))
            }
            Family::NegBinomial => {
                if y < 0.0 {
                    0.0
                } else {
                    let (mu, size) = (theta[0], theta[1]);
                    let p = size / (size + mu);
                    beta_reg(size, y.floor() + 1.0, p)
                }
            }
            Family::Gamma => {
                if y <= 0.0 {
                    0.0
                } else {
                    let (mu, shape) = (theta[0], theta[1]);
                    gamma_lr(shape, shape * y / mu)
                }
            }
        })
    }

    /// Log-likelihood, score and Hessian of `l(y | eta)` for all
    /// distributional parameters at once.
    pub fn predictor_derivatives(
        &self,
        y: f64,
        eta: &[f64],
    ) -> Result<PredictorDerivatives, FamilyError> {
        self.check_support(y)?;
        assert_eq!(eta.len(), self.n_params(), "predictor tuple length");
        let padded = [eta[0], if eta.len() > 1 { eta[1] } else { 0.0 }];
        let loglik = self.ll_eta(y, ln_gamma(y + 1.0), padded);
        let mut score = Vec::with_capacity(self.n_params());
        let mut hess = Vec::with_capacity(self.n_params());
        for r in 0..self.n_params() {
            let (s, h) = self.sh_eta(y, padded, r);
            score.push(s);
            hess.push(h);
        }
        Ok(PredictorDerivatives {
            loglik,
            score,
            hess,
        })
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_at_standard_normal_mode() {
        let ll = Family::Gaussian.logpdf(0.0, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        assert_relative_eq!(ll, -0.918938533204673, epsilon = 1e-12);
    }

    #[test]
    fn poisson_zero_count() {
        for lambda in [0.3, 1.0, 4.5] {
            let ll = Family::Poisson.logpdf(0.0, &[lambda]).unwrap();
            assert_relative_eq!(ll, -lambda, epsilon = 1e-12);
        }
    }

    #[test]
    fn negbinomial_matches_direct_nb2_mass() {
        // NB2 with mean 2, size 5: p = size/(size+mu), mass via binomial coefficient
        let (y, mu, size) = (3.0, 2.0, 5.0);
        let p = size / (size + mu);
        let direct = ln_gamma(y + size) - ln_gamma(size) - ln_gamma(y + 1.0)
            + size * p.ln()
            + y * (1.0 - p).ln();
        let ll = Family::NegBinomial.logpdf(y, &[mu, size]).unwrap();
        assert_relative_eq!(ll, direct, epsilon = 1e-12);
    }

    #[test]
    fn bernoulli_score_identity() {
        let d = Family::Bernoulli.predictor_derivatives(1.0, &[0.0]).unwrap();
        assert_relative_eq!(d.score[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn poisson_score_zero_at_mle() {
        let d = Family::Poisson
            .predictor_derivatives(2.0, &[2.0_f64.ln()])
            .unwrap();
        assert_relative_eq!(d.score[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_unit_sd_reduces_to_residual() {
        let d = Family::Gaussian
            .predictor_derivatives(1.3, &[0.4, 0.0])
            .unwrap();
        assert_relative_eq!(d.score[0], 1.3 - 0.4, epsilon = 1e-12);
        assert_relative_eq!(d.hess[0], -1.0, epsilon = 1e-12);
    }

    fn draw_case(rng: &mut ChaCha8Rng, family: Family) -> (f64, Vec<f64>) {
        let eta: Vec<f64> = (0..family.n_params())
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        let y = match family {
            Family::Bernoulli => f64::from(rng.gen_bool(0.5)),
            Family::Poisson | Family::NegBinomial => rng.gen_range(0..12) as f64,
            Family::Gaussian => rng.gen_range(-3.0..3.0),
            Family::Gamma => rng.gen_range(0.05..5.0),
        };
        (y, eta)
    }

    fn logpdf_of_eta(family: Family, y: f64, eta: &[f64]) -> f64 {
        let theta: Vec<f64> = family
            .links()
            .iter()
            .zip(eta)
            .map(|(link, &e)| link.apply(e))
            .collect();
        family.logpdf(y, &theta).unwrap()
    }

    /// Central finite differences of logpdf through the links must match the
    /// analytic score and Hessian on every family and parameter.
    #[test]
    fn derivatives_match_finite_differences() {
        let families = [
            Family::Bernoulli,
            Family::Poisson,
            Family::Gaussian,
            Family::NegBinomial,
            Family::Gamma,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // five-point stencils: wide enough steps that ln_gamma roundoff
        // stays below the 1e-5 relative target
        let h = 1e-3;
        for family in families {
            for _ in 0..20 {
                let (y, eta) = draw_case(&mut rng, family);
                let d = family.predictor_derivatives(y, &eta).unwrap();
                assert_relative_eq!(d.loglik, logpdf_of_eta(family, y, &eta), epsilon = 1e-10);
                for r in 0..family.n_params() {
                    let f = |offset: f64| {
                        let mut shifted = eta.clone();
                        shifted[r] += offset;
                        logpdf_of_eta(family, y, &shifted)
                    };
                    let score_fd =
                        (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
                    let hess_fd = (-f(-2.0 * h) + 16.0 * f(-h) - 30.0 * f(0.0) + 16.0 * f(h)
                        - f(2.0 * h))
                        / (12.0 * h * h);
                    assert_relative_eq!(d.score[r], score_fd, max_relative = 1e-5, epsilon = 1e-8);
                    assert_relative_eq!(d.hess[r], hess_fd, max_relative = 1e-5, epsilon = 1e-7);
                }
            }
        }
    }

    /// Discrete masses must sum to one over a truncated support.
    #[test]
    fn discrete_masses_sum_to_one() {
        let cases: [(Family, Vec<f64>); 2] = [
            (Family::Poisson, vec![3.7]),
            (Family::NegBinomial, vec![2.5, 1.8]),
        ];
        for (family, theta) in cases {
            let mut total = 0.0;
            let mut y = 0.0;
            loop {
                let mass = family.logpdf(y, &theta).unwrap().exp();
                total += mass;
                if mass < 1e-12 && y > theta[0] {
                    break;
                }
                y += 1.0;
                assert!(y < 10_000.0);
            }
            assert!((1.0 - total).abs() < 1e-9, "mass deficit {}", 1.0 - total);
        }
    }

    #[test]
    fn support_violations_are_rejected() {
        assert!(Family::Bernoulli.check_support(2.0).is_err());
        assert!(Family::Poisson.check_support(-1.0).is_err());
        assert!(Family::Poisson.check_support(2.5).is_err());
        assert!(Family::Gamma.check_support(0.0).is_err());
        assert!(Family::Gaussian.check_support(f64::NAN).is_err());
        assert!(Family::Poisson.logpdf(1.0, &[-0.5]).is_err());
    }
}
