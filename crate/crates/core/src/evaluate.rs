//! Evaluation metrics: relative root mean squared errors, pointwise
//! frequentist coverage, scalar bias/rMSE/coverage, and the least-squares
//! latent-process reconstruction used to score estimated eigenbases.
//!
//! All curve comparisons happen on the dense grid regardless of the
//! sampling regime the model was fitted under.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bases::EigenBasis;
use crate::quad;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("truth curves have zero norm; rrMSE undefined")]
    ZeroTruth,
    #[error("curve sets must share index sets and grids")]
    Mismatch,
    #[error("at least {0} draws required")]
    TooFewDraws(usize),
}

/// Function values on a shared grid, one row per curve.
#[derive(Debug, Clone)]
pub struct CurveSet {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl CurveSet {
    pub fn new(grid: Vec<f64>, values: DMatrix<f64>) -> Self {
        assert_eq!(grid.len(), values.ncols());
        CurveSet { grid, values }
    }

    pub fn n_curves(&self) -> usize {
        self.values.nrows()
    }
}

/// Relative root mean squared error
/// `sqrt( mean_i ||f_i - fhat_i||^2 / mean_i ||f_i||^2 )`
/// with trapezoid-quadrature norms.
pub fn rrmse(truth: &CurveSet, est: &CurveSet) -> Result<f64, EvalError> {
    if truth.grid.len() != est.grid.len()
        || truth.values.shape() != est.values.shape()
        || truth
            .grid
            .iter()
            .zip(&est.grid)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(EvalError::Mismatch);
    }
    let w = quad::trapezoid_weights(&truth.grid);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..truth.n_curves() {
        for (g, &wg) in w.iter().enumerate() {
            let f = truth.values[(i, g)];
            let d = f - est.values[(i, g)];
            num += wg * d * d;
            den += wg * f * f;
        }
    }
    if den <= 0.0 {
        return Err(EvalError::ZeroTruth);
    }
    Ok((num / den).sqrt())
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0 && (0.0..=1.0).contains(&p));
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Pointwise frequentist coverage of equal-tailed credible bands:
/// `FC(t) = mean_i 1{ q_lo(t) <= f_i(t) <= q_hi(t) }` with empirical draw
/// quantiles per curve. `draws[i]` holds one curve's draws (rows) on the
/// shared grid (columns).
pub fn pointwise_coverage(
    draws: &[DMatrix<f64>],
    truth: &CurveSet,
    level: f64,
) -> Result<Vec<f64>, EvalError> {
    if draws.len() != truth.n_curves() {
        return Err(EvalError::Mismatch);
    }
    if draws.iter().any(|d| d.nrows() < 100) {
        return Err(EvalError::TooFewDraws(100));
    }
    let alpha = (1.0 - level) / 2.0;
    let n_grid = truth.grid.len();
    let mut hits = vec![0.0; n_grid];
    for (i, d) in draws.iter().enumerate() {
        if d.ncols() != n_grid {
            return Err(EvalError::Mismatch);
        }
        let mut col = vec![0.0; d.nrows()];
        for g in 0..n_grid {
            for (r, slot) in col.iter_mut().enumerate() {
                *slot = d[(r, g)];
            }
            col.sort_by(f64::total_cmp);
            let lo = empirical_quantile(&col, alpha);
            let hi = empirical_quantile(&col, 1.0 - alpha);
            let f = truth.values[(i, g)];
            if f >= lo && f <= hi {
                hits[g] += 1.0;
            }
        }
    }
    let n = truth.n_curves() as f64;
    Ok(hits.into_iter().map(|h| h / n).collect())
}

/// Posterior summary of one scalar coefficient in one replicate.
#[derive(Debug, Clone, Copy)]
pub struct ScalarSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Bias, root MSE and mean frequentist coverage of a scalar coefficient
/// over replicates, computed from posterior means and interval bounds.
pub fn scalar_metrics(summaries: &[ScalarSummary], truth: f64) -> Result<(f64, f64, f64), EvalError> {
    if summaries.len() < 2 {
        return Err(EvalError::TooFewDraws(2));
    }
    let r = summaries.len() as f64;
    let bias = summaries.iter().map(|s| s.mean - truth).sum::<f64>() / r;
    let rmse = (summaries
        .iter()
        .map(|s| (s.mean - truth) * (s.mean - truth))
        .sum::<f64>()
        / r)
        .sqrt();
    let fc = summaries
        .iter()
        .filter(|s| s.lower <= truth && truth <= s.upper)
        .count() as f64
        / r;
    Ok((bias, rmse, fc))
}

/// Least-squares reconstruction of latent curves in a (possibly estimated)
/// eigenbasis: per unit, project the weighted multivariate curve onto the
/// basis and report the rrMSE per dimension. Rank-deficient bases fall
/// back to the minimum-norm solution.
pub fn reconstruct_latent_ls(
    truth_latent: &[CurveSet],
    basis: &EigenBasis,
) -> Result<Vec<f64>, EvalError> {
    let k = truth_latent.len();
    assert_eq!(k, basis.n_dims(), "one curve set per dimension");
    let grid = &truth_latent[0].grid;
    let n = truth_latent[0].n_curves();
    if truth_latent
        .iter()
        .any(|c| c.n_curves() != n || c.grid.len() != grid.len())
    {
        return Err(EvalError::Mismatch);
    }
    let m = basis.n_components();
    let w = quad::trapezoid_weights(grid);

    // evaluated basis per dimension and weighted normal equations
    let mut psi = Vec::with_capacity(k);
    for dim in 0..k {
        psi.push(basis.evaluate(dim, grid).expect("grid within basis span"));
    }
    let mut gram = DMatrix::zeros(m, m);
    for dim in 0..k {
        let wk = basis.weights[dim];
        for a in 0..m {
            for b in a..m {
                let mut acc = 0.0;
                for (g, &wg) in w.iter().enumerate() {
                    acc += wg * psi[dim][(g, a)] * psi[dim][(g, b)];
                }
                gram[(a, b)] += wk * acc;
                if a != b {
                    gram[(b, a)] = gram[(a, b)];
                }
            }
        }
    }
    let svd = gram.svd(true, true);
    let mut reconstructed: Vec<DMatrix<f64>> = (0..k)
        .map(|dim| DMatrix::zeros(n, truth_latent[dim].grid.len()))
        .collect();
    for i in 0..n {
        let mut rhs = DVector::zeros(m);
        for dim in 0..k {
            let wk = basis.weights[dim];
            for a in 0..m {
                let mut acc = 0.0;
                for (g, &wg) in w.iter().enumerate() {
                    acc += wg * psi[dim][(g, a)] * truth_latent[dim].values[(i, g)];
                }
                rhs[a] += wk * acc;
            }
        }
        let rho = svd
            .solve(&rhs, 1e-10)
            .expect("svd computed with singular vectors");
        for dim in 0..k {
            let rec = &psi[dim] * &rho;
            for g in 0..grid.len() {
                reconstructed[dim][(i, g)] = rec[g];
            }
        }
    }
    (0..k)
        .map(|dim| {
            rrmse(
                &truth_latent[dim],
                &CurveSet::new(grid.clone(), reconstructed[dim].clone()),
            )
        })
        .collect()
}

/// Normalized randomized quantile residual of one observation:
/// `Phi^{-1}(u)` with `u` uniform on `[F(y-), F(y)]` for discrete
/// families and `u = F(y)` otherwise. Well-calibrated fits give standard
/// normal residuals.
pub fn randomized_quantile_residual<R: rand::Rng>(
    family: crate::families::Family,
    y: f64,
    theta: &[f64],
    rng: &mut R,
) -> f64 {
    use crate::families::Family;
    let hi = family.cdf(y, theta).expect("valid parameters");
    let u = match family {
        Family::Bernoulli | Family::Poisson | Family::NegBinomial => {
            let lo = if y >= 1.0 {
                family.cdf(y - 1.0, theta).expect("valid parameters")
            } else {
                0.0
            };
            lo + (hi - lo) * rng.gen_range(0.0..1.0)
        }
        Family::Gaussian | Family::Gamma => hi,
    };
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    statrs::distribution::ContinuousCDF::inverse_cdf(
        &statrs::distribution::Normal::new(0.0, 1.0).unwrap(),
        u,
    )
}
