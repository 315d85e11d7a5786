//! Reference data-generating process with known ground truth: three mixed
//! functional dimensions (binary, count, Gaussian) driven by a shared
//! latent multivariate Gaussian process on a split-Fourier eigenbasis.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Distribution;

use crate::bases::{split_fourier_eigenbasis, EigenBasis};
use crate::families::Family;
use crate::funcdata::{
    CovariateTable, Interval, MultivariateFunctionalDataset, ScalarObservation, DENSE_GRID_LEN,
};

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    /// Number of multivariate functional observations.
    pub n: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { n: 150 }
    }
}

pub const SIM_DIMS: usize = 3;
pub const SIM_COMPONENTS: usize = 6;

/// Everything the evaluation harness needs to score a fit against the
/// generating process.
#[derive(Debug, Clone)]
pub struct SimulationTruth {
    pub grid: Vec<f64>,
    pub eigenbasis: EigenBasis,
    /// n x M latent scores.
    pub scores: DMatrix<f64>,
    /// Per dimension: n x grid latent-process values.
    pub lambda: Vec<DMatrix<f64>>,
    /// Per dimension: n x grid additive predictors of the location.
    pub eta1: Vec<DMatrix<f64>>,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub gamma0: f64,
    pub gamma1: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl SimulationTruth {
    pub fn covariates(&self) -> CovariateTable {
        let mut table = CovariateTable::new(vec!["x".into(), "z".into()]);
        for i in 0..self.x.len() {
            table.insert(&format!("{}", i + 1), vec![self.x[i], self.z[i]]);
        }
        table
    }
}

/// Families of the three simulated dimensions.
pub fn sim_families() -> Vec<Family> {
    vec![Family::Bernoulli, Family::Poisson, Family::Gaussian]
}

/// True eigenvalues: linearly decreasing `(M + 1 - m) / M`.
pub fn sim_eigenvalues() -> Vec<f64> {
    (1..=SIM_COMPONENTS)
        .map(|m| (SIM_COMPONENTS + 1 - m) as f64 / SIM_COMPONENTS as f64)
        .collect()
}

/// Draw one dense replicate on the 101-point grid together with its truth.
pub fn simulate_dataset<R: Rng>(
    config: &SimulationConfig,
    rng: &mut R,
) -> (MultivariateFunctionalDataset, SimulationTruth) {
    assert!(config.n >= 2);
    let domain = Interval::new(0.0, 1.0);
    let grid = domain.grid(DENSE_GRID_LEN);
    let nu = sim_eigenvalues();
    let mut basis = split_fourier_eigenbasis(SIM_COMPONENTS, SIM_DIMS, &grid, rng);
    basis.nu = nu.clone();

    let n = config.n;
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let z: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let mut scores = DMatrix::zeros(n, SIM_COMPONENTS);
    for i in 0..n {
        for m in 0..SIM_COMPONENTS {
            let draw: f64 = rand_distr::StandardNormal.sample(rng);
            scores[(i, m)] = draw * nu[m].sqrt();
        }
    }

    let beta0: Vec<f64> = grid
        .iter()
        .map(|t| (2.0 * std::f64::consts::PI * t).cos())
        .collect();
    let beta1: Vec<f64> = beta0.iter().map(|v| -v).collect();
    let (gamma0, gamma1) = (-2.0, 0.5);

    let mut lambda = Vec::with_capacity(SIM_DIMS);
    let mut eta1 = Vec::with_capacity(SIM_DIMS);
    for k in 0..SIM_DIMS {
        let lam = &scores * basis.psi[k].transpose();
        let mut eta = lam.clone();
        for i in 0..n {
            for (g, _) in grid.iter().enumerate() {
                eta[(i, g)] += beta0[g] + beta1[g] * x[i];
            }
        }
        lambda.push(lam);
        eta1.push(eta);
    }

    let mut rows = Vec::with_capacity(SIM_DIMS * n * grid.len());
    for i in 0..n {
        let unit = format!("{}", i + 1);
        let eta2 = gamma0 + gamma1 * z[i];
        let sd = eta2.exp();
        for k in 0..SIM_DIMS {
            for (g, &t) in grid.iter().enumerate() {
                let e = eta1[k][(i, g)];
                let y = match k {
                    0 => f64::from(rng.gen_bool(1.0 / (1.0 + (-e).exp()))),
                    1 => rand_distr::Poisson::new(e.exp().max(1e-12))
                        .unwrap()
                        .sample(rng),
                    _ => {
                        let noise: f64 = rand_distr::StandardNormal.sample(rng);
                        e + sd * noise
                    }
                };
                rows.push(ScalarObservation {
                    dim: k + 1,
                    unit: unit.clone(),
                    group: None,
                    t,
                    y,
                });
            }
        }
    }
    let dataset = MultivariateFunctionalDataset::new(SIM_DIMS, domain, sim_families(), &rows)
        .expect("generated data satisfies its own invariants");

    (
        dataset,
        SimulationTruth {
            grid,
            eigenbasis: basis,
            scores,
            lambda,
            eta1,
            beta0,
            beta1,
            gamma0,
            gamma1,
            x,
            z,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eigenvalues_decrease_linearly() {
        let nu = sim_eigenvalues();
        let expected = [1.0, 5.0 / 6.0, 4.0 / 6.0, 3.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0];
        for (got, want) in nu.iter().zip(expected) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn covariate_effects_cancel_at_x_equal_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, truth) = simulate_dataset(&SimulationConfig { n: 5 }, &mut rng);
        for g in 0..truth.grid.len() {
            assert_relative_eq!(truth.beta0[g] + truth.beta1[g] * 1.0, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn gaussian_sd_from_gamma_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, truth) = simulate_dataset(&SimulationConfig { n: 4 }, &mut rng);
        let sd_z1 = (truth.gamma0 + truth.gamma1).exp();
        assert_relative_eq!(sd_z1, (-1.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(sd_z1, 0.22313016, epsilon = 1e-7);
    }

    #[test]
    fn dense_replicate_has_expected_row_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ds, truth) = simulate_dataset(&SimulationConfig { n: 7 }, &mut rng);
        assert_eq!(ds.observations().len(), 101 * 3 * 7);
        // eta reconstructs exactly from stored parts
        for k in 0..SIM_DIMS {
            for i in 0..7 {
                for g in 0..101 {
                    let rebuilt = truth.beta0[g]
                        + truth.beta1[g] * truth.x[i]
                        + truth.lambda[k][(i, g)];
                    assert_relative_eq!(truth.eta1[k][(i, g)], rebuilt, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn score_variances_match_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let (_, truth) = simulate_dataset(&SimulationConfig { n }, &mut rng);
        let nu = sim_eigenvalues();
        for m in 0..SIM_COMPONENTS {
            let col = truth.scores.column(m);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            let mc_sd = nu[m] * (2.0 / n as f64).sqrt();
            assert!(
                (var - nu[m]).abs() < 3.0 * mc_sd,
                "component {m}: var {var} vs {}",
                nu[m]
            );
        }
    }

    #[test]
    fn mean_predictor_converges_to_functional_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let (_, truth) = simulate_dataset(&SimulationConfig { n }, &mut rng);
        // pointwise variance of eta is bounded by beta1^2/3 + sum(nu)*max psi^2
        for k in 0..SIM_DIMS {
            for g in (0..101).step_by(10) {
                let mean = truth.eta1[k].column(g).sum() / n as f64;
                let var: f64 = truth.eta1[k]
                    .column(g)
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (n as f64 - 1.0);
                let bound = 4.0 * (var / n as f64).sqrt();
                assert!(
                    (mean - truth.beta0[g]).abs() < bound.max(0.02),
                    "dim {k} grid {g}: {mean} vs {}",
                    truth.beta0[g]
                );
            }
        }
    }

    #[test]
    fn replicates_are_reproducible_in_isolation() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            simulate_dataset(&SimulationConfig { n: 6 }, &mut rng)
        };
        let (a, _) = run();
        let (b, _) = run();
        assert_eq!(a.observations(), b.observations());
    }
}
