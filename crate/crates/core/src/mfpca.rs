//! Multivariate eigenbasis assembly from univariate scores per latent
//! process: weighted score-covariance eigenanalysis, truncation, and
//! grid evaluation.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::bases::{fix_component_signs, BasisError, EigenBasis};
use crate::gfpca::UnivariateFpca;

#[derive(Debug, Error)]
pub enum MfpcaError {
    #[error("dimension {0} has zero total eigenvalue; cannot derive weights")]
    DegenerateDimension(usize),
    #[error("score column blocks ({scores}) do not match the univariate component counts ({uni})")]
    BlockMismatch { scores: usize, uni: usize },
    #[error("univariate eigenfunction grids differ across dimensions")]
    GridMismatch,
    #[error("weights must be positive")]
    NonPositiveWeight,
}

/// Stacked univariate scores for one latent process: one row per level
/// (unit or group), column blocks ordered by dimension.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub xi: DMatrix<f64>,
    pub block_sizes: Vec<usize>,
    pub level: usize,
}

impl ScoreMatrix {
    pub fn total_components(&self) -> usize {
        self.block_sizes.iter().sum()
    }
}

/// Inverse sums of univariate eigenvalues, the weighting scheme that
/// balances the contribution of dimensions with unequal variation.
pub fn eigenvalue_weights(upsilon_sums: &[f64]) -> Result<Vec<f64>, MfpcaError> {
    upsilon_sums
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            if s > 0.0 {
                Ok(1.0 / s)
            } else {
                Err(MfpcaError::DegenerateDimension(k + 1))
            }
        })
        .collect()
}

/// Eigenanalysis of the weighted score covariance
/// `(n-1)^{-1} D Xi' Xi D` with `D = diag(w_k^{1/2})` replicated per block.
///
/// Scores are column-centered first. Components with nonpositive sample
/// eigenvalues are dropped; the remaining multivariate eigenfunctions are
/// linear combinations of the univariate eigenfunctions, scaled by
/// `w_k^{-1/2}` per dimension so that the result is orthonormal under the
/// weighted scalar product recorded in the output.
pub fn assemble_mfpca(
    scores: &ScoreMatrix,
    uni: &[UnivariateFpca],
    weights: &[f64],
) -> Result<EigenBasis, MfpcaError> {
    let k = uni.len();
    assert_eq!(weights.len(), k, "one weight per dimension");
    assert_eq!(scores.block_sizes.len(), k, "one block per dimension");
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(MfpcaError::NonPositiveWeight);
    }
    let m_total = scores.total_components();
    if m_total != scores.xi.ncols()
        || uni
            .iter()
            .zip(&scores.block_sizes)
            .any(|(u, &b)| u.phi.ncols() != b)
    {
        return Err(MfpcaError::BlockMismatch {
            scores: scores.xi.ncols(),
            uni: uni.iter().map(|u| u.phi.ncols()).sum(),
        });
    }
    let grid = &uni[0].grid;
    if uni.iter().any(|u| {
        u.grid.len() != grid.len()
            || u.grid
                .iter()
                .zip(grid)
                .any(|(a, b)| (a - b).abs() > 1e-12)
    }) {
        return Err(MfpcaError::GridMismatch);
    }

    let n = scores.xi.nrows();
    // column-centered, weight-scaled scores
    let mut z = scores.xi.clone();
    for c in 0..z.ncols() {
        let mean = z.column(c).sum() / n as f64;
        for r in 0..n {
            z[(r, c)] -= mean;
        }
    }
    let mut col = 0usize;
    let mut sqrt_w_per_col = Vec::with_capacity(m_total);
    for (dim, &b) in scores.block_sizes.iter().enumerate() {
        for _ in 0..b {
            sqrt_w_per_col.push(weights[dim].sqrt());
            col += 1;
        }
    }
    debug_assert_eq!(col, m_total);
    for c in 0..m_total {
        for r in 0..n {
            z[(r, c)] *= sqrt_w_per_col[c];
        }
    }

    let cov = z.transpose() * &z / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..m_total).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let tol = 1e-12 * eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    let nu: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i]).collect();

    let mut psi = Vec::with_capacity(k);
    for (dim, u) in uni.iter().enumerate() {
        let offset: usize = scores.block_sizes[..dim].iter().sum();
        let b = scores.block_sizes[dim];
        let scale = weights[dim].sqrt().recip();
        let mut coeff = DMatrix::zeros(b, kept.len());
        for (out_col, &i) in kept.iter().enumerate() {
            for j in 0..b {
                coeff[(j, out_col)] = scale * eig.eigenvectors[(offset + j, i)];
            }
        }
        psi.push(&u.phi * coeff);
    }
    fix_component_signs(&mut psi);

    Ok(EigenBasis {
        level: scores.level,
        grid: grid.clone(),
        psi,
        nu,
        weights: weights.to_vec(),
    })
}

/// Keep the smallest leading set of components reaching the requested
/// proportion of variance explained. Applied per latent process; never
/// drops a process with positive total variance entirely.
pub fn truncate(basis: &EigenBasis, pve: f64) -> EigenBasis {
    assert!(pve > 0.0 && pve <= 1.0, "pve must lie in (0, 1]");
    let total: f64 = basis.nu.iter().sum();
    if total <= 0.0 {
        return basis.clone();
    }
    let mut acc = 0.0;
    let mut m = basis.nu.len();
    for (i, &v) in basis.nu.iter().enumerate() {
        acc += v;
        if acc / total >= pve - 1e-12 {
            m = i + 1;
            break;
        }
    }
    basis.truncated(m)
}

/// Linear interpolation of stored eigenfunction values at requested times
/// (0-based dimension), one column per component.
pub fn evaluate_eigenbasis(
    basis: &EigenBasis,
    dim: usize,
    times: &[f64],
) -> Result<DMatrix<f64>, BasisError> {
    basis.evaluate(dim, times)
}

/// Scalar-product weighting scheme for the MFPCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Equal,
    InverseEigenvalueSums,
}

/// Assemble one multivariate eigenbasis per latent level from per-dimension
/// univariate FPCA results (`uni[dim]` holds that dimension's levels).
pub fn assemble_levels(
    uni: &[Vec<UnivariateFpca>],
    weighting: Weighting,
) -> Result<Vec<EigenBasis>, MfpcaError> {
    let k = uni.len();
    assert!(k >= 1);
    let mut levels: Vec<usize> = uni[0].iter().map(|f| f.level).collect();
    levels.sort_unstable();
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        let per_dim: Vec<&UnivariateFpca> = (0..k)
            .map(|dim| {
                uni[dim]
                    .iter()
                    .find(|f| f.level == level)
                    .expect("every dimension carries the same levels")
            })
            .collect();
        let weights = match weighting {
            Weighting::Equal => vec![1.0; k],
            Weighting::InverseEigenvalueSums => {
                let sums: Vec<f64> = per_dim
                    .iter()
                    .map(|f| f.upsilon.iter().sum::<f64>())
                    .collect();
                eigenvalue_weights(&sums)?
            }
        };
        let n_rows = per_dim[0].scores.nrows();
        let block_sizes: Vec<usize> = per_dim.iter().map(|f| f.phi.ncols()).collect();
        let total: usize = block_sizes.iter().sum();
        let mut xi = DMatrix::zeros(n_rows, total);
        let mut offset = 0;
        for f in &per_dim {
            if f.scores.nrows() != n_rows {
                return Err(MfpcaError::BlockMismatch {
                    scores: f.scores.nrows(),
                    uni: n_rows,
                });
            }
            for m in 0..f.phi.ncols() {
                for r in 0..n_rows {
                    xi[(r, offset + m)] = f.scores[(r, m)];
                }
            }
            offset += f.phi.ncols();
        }
        let scores = ScoreMatrix {
            xi,
            block_sizes,
            level,
        };
        let owned: Vec<UnivariateFpca> = per_dim.into_iter().cloned().collect();
        out.push(assemble_mfpca(&scores, &owned, &weights)?);
    }
    Ok(out)
}
