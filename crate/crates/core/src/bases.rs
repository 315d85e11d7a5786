//! Spline and Fourier basis evaluation, difference penalties, row tensor
//! products, and the split-Fourier eigenbasis constructor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::funcdata::Interval;
use crate::quad;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("point {0} outside the knot span [{1}, {2}]")]
    OutsideDomain(f64, f64, f64),
    #[error("difference order {order} must be smaller than the basis size {d}")]
    OrderTooLarge { order: usize, d: usize },
    #[error("row tensor product needs equal row counts ({0} vs {1})")]
    RowMismatch(usize, usize),
    #[error("smoothing parameters must be positive")]
    NonPositiveSmoothing,
    #[error("degree must be at least 1")]
    DegreeZero,
}

/// Kind tag carried along with evaluated basis matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasisMeta {
    BSpline {
        domain: Interval,
        interior_knots: usize,
        degree: usize,
        cyclic: bool,
    },
    Fourier {
        count: usize,
    },
    Constant,
    Covariate,
}

/// Evaluated basis matrix (rows = evaluation points).
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub meta: BasisMeta,
}

/// Symmetric positive semidefinite penalty with known null-space dimension.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    pub values: DMatrix<f64>,
    pub null_dim: usize,
}

impl PenaltyMatrix {
    pub fn zeros(d: usize) -> Self {
        PenaltyMatrix {
            values: DMatrix::zeros(d, d),
            null_dim: d,
        }
    }

    pub fn identity(d: usize) -> Self {
        PenaltyMatrix {
            values: DMatrix::identity(d, d),
            null_dim: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Rank of the penalty (dimension minus null space).
    pub fn rank(&self) -> usize {
        self.dim() - self.null_dim
    }
}

/// Evaluate a B-spline design matrix with equidistant knots over `domain`.
///
/// Non-cyclic bases use clamped boundary knots and have
/// `knots + degree + 1` columns. Cyclic bases wrap uniform B-splines
/// around the domain; there `knots` is the basis dimension directly and
/// the resulting functions are periodic with smoothness `degree - 1` at
/// the seam.
pub fn bspline_design(
    knots: usize,
    degree: usize,
    points: &[f64],
    cyclic: bool,
    domain: Interval,
) -> Result<BasisMatrix, BasisError> {
    if degree == 0 {
        return Err(BasisError::DegreeZero);
    }
    for &t in points {
        if !domain.contains(t) {
            return Err(BasisError::OutsideDomain(t, domain.lo, domain.hi));
        }
    }
    let values = if cyclic {
        cyclic_bspline_values(knots, degree, points, domain)
    } else {
        clamped_bspline_values(knots, degree, points, domain)
    };
    Ok(BasisMatrix {
        values,
        meta: BasisMeta::BSpline {
            domain,
            interior_knots: knots,
            degree,
            cyclic,
        },
    })
}

fn clamped_bspline_values(
    interior: usize,
    degree: usize,
    points: &[f64],
    domain: Interval,
) -> DMatrix<f64> {
    let d = interior + degree + 1;
    // clamped knot vector of length d + degree + 1
    let mut knots = Vec::with_capacity(d + degree + 1);
    knots.extend(std::iter::repeat(domain.lo).take(degree + 1));
    for j in 1..=interior {
        knots.push(domain.lo + domain.len() * j as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat(domain.hi).take(degree + 1));

    let mut out = DMatrix::zeros(points.len(), d);
    let mut work = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for (row, &t) in points.iter().enumerate() {
        // span index mu with knots[mu] <= t < knots[mu + 1]
        let mut mu = degree
            + knots[degree..=d]
                .windows(2)
                .position(|w| t >= w[0] && t < w[1])
                .unwrap_or(d - degree - 1);
        if t >= domain.hi {
            mu = d - 1;
        }
        basis_funs(&knots, mu, t, degree, &mut work, &mut left, &mut right);
        for (j, &v) in work.iter().enumerate() {
            out[(row, mu - degree + j)] = v;
        }
    }
    out
}

/// The de Boor triangular scheme for the `degree + 1` B-splines that are
/// nonzero on the span `mu`.
fn basis_funs(
    knots: &[f64],
    mu: usize,
    t: f64,
    degree: usize,
    n: &mut [f64],
    left: &mut [f64],
    right: &mut [f64],
) {
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[mu + 1 - j];
        right[j] = knots[mu + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
}

/// Cardinal B-spline of the given degree with support (0, degree + 1).
fn cardinal_bspline(degree: usize, x: f64) -> f64 {
    if x <= 0.0 || x >= (degree + 1) as f64 {
        return if degree == 0 && (0.0..1.0).contains(&x) {
            1.0
        } else {
            0.0
        };
    }
    if degree == 0 {
        return 1.0;
    }
    let p = degree as f64;
    (x * cardinal_bspline(degree - 1, x) + (p + 1.0 - x) * cardinal_bspline(degree - 1, x - 1.0))
        / p
}

fn cyclic_bspline_values(
    d: usize,
    degree: usize,
    points: &[f64],
    domain: Interval,
) -> DMatrix<f64> {
    assert!(d > degree, "cyclic basis needs more knots than the degree");
    let h = domain.len() / d as f64;
    let mut out = DMatrix::zeros(points.len(), d);
    for (row, &t) in points.iter().enumerate() {
        let s = (t - domain.lo) / h;
        let base = s.floor() as i64;
        for j in (base - degree as i64)..=base {
            let v = cardinal_bspline(degree, s - j as f64);
            if v != 0.0 {
                let col = j.rem_euclid(d as i64) as usize;
                out[(row, col)] += v;
            }
        }
    }
    out
}

/// Order-`order` difference penalty `D' D` on `d` coefficients.
pub fn difference_penalty(d: usize, order: usize) -> Result<PenaltyMatrix, BasisError> {
    if order >= d {
        return Err(BasisError::OrderTooLarge { order, d });
    }
    let coeffs = difference_coefficients(order);
    let mut delta = DMatrix::zeros(d - order, d);
    for i in 0..d - order {
        for (k, &c) in coeffs.iter().enumerate() {
            delta[(i, i + k)] = c;
        }
    }
    Ok(PenaltyMatrix {
        values: delta.transpose() * &delta,
        null_dim: order,
    })
}

/// Cyclic (wrap-around) difference penalty; its null space holds only
/// constants.
pub fn cyclic_difference_penalty(d: usize, order: usize) -> Result<PenaltyMatrix, BasisError> {
    if order >= d {
        return Err(BasisError::OrderTooLarge { order, d });
    }
    let coeffs = difference_coefficients(order);
    let mut delta = DMatrix::zeros(d, d);
    for i in 0..d {
        for (k, &c) in coeffs.iter().enumerate() {
            delta[(i, (i + k) % d)] += c;
        }
    }
    Ok(PenaltyMatrix {
        values: delta.transpose() * &delta,
        null_dim: 1,
    })
}

fn difference_coefficients(order: usize) -> Vec<f64> {
    // k-th coefficient of the order-th forward difference
    let mut c = vec![0.0; order + 1];
    for (k, slot) in c.iter_mut().enumerate() {
        let binom = (0..k).fold(1.0, |acc, i| acc * (order - i) as f64 / (i + 1) as f64);
        *slot = if (order - k) % 2 == 0 { binom } else { -binom };
    }
    c
}

/// Row tensor product `(V (x) 1_w') . (1_v' (x) W)`; column `a*w + b` is the
/// elementwise product of column `a` of `V` and column `b` of `W`.
pub fn row_tensor(v: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>, BasisError> {
    if v.nrows() != w.nrows() {
        return Err(BasisError::RowMismatch(v.nrows(), w.nrows()));
    }
    let (s, nv, nw) = (v.nrows(), v.ncols(), w.ncols());
    let mut out = DMatrix::zeros(s, nv * nw);
    for a in 0..nv {
        for b in 0..nw {
            let col = a * nw + b;
            for r in 0..s {
                out[(r, col)] = v[(r, a)] * w[(r, b)];
            }
        }
    }
    Ok(out)
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols() * b.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let aij = a[(i, j)];
            if aij != 0.0 {
                for p in 0..b.nrows() {
                    for q in 0..b.ncols() {
                        out[(i * b.nrows() + p, j * b.ncols() + q)] = aij * b[(p, q)];
                    }
                }
            }
        }
    }
    out
}

/// Anisotropic tensor-product penalty
/// `inv_tau2_x * (Px (x) I) + inv_tau2_t * (I (x) Pt)`.
pub fn tensor_penalty(
    px: &PenaltyMatrix,
    pt: &PenaltyMatrix,
    inv_tau2_x: f64,
    inv_tau2_t: f64,
) -> Result<PenaltyMatrix, BasisError> {
    if inv_tau2_x <= 0.0 || inv_tau2_t <= 0.0 {
        return Err(BasisError::NonPositiveSmoothing);
    }
    let (dx, dt) = (px.dim(), pt.dim());
    let mut values = kronecker(&px.values, &DMatrix::identity(dt, dt));
    values *= inv_tau2_x;
    values += inv_tau2_t * kronecker(&DMatrix::identity(dx, dx), &pt.values);
    let null_dim = count_null_eigenvalues(&values);
    Ok(PenaltyMatrix { values, null_dim })
}

fn count_null_eigenvalues(m: &DMatrix<f64>) -> usize {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-10 * max.max(1.0);
    eig.eigenvalues.iter().filter(|&&l| l.abs() <= tol).count()
}

/// Multivariate eigenfunctions on a grid with eigenvalues, scalar-product
/// weights, and a latent-process level tag.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    /// Latent-process tag: 0 is the per-unit process, 1 the nested layer.
    pub level: usize,
    pub grid: Vec<f64>,
    /// Per dimension: grid-length x M matrix of eigenfunction values.
    pub psi: Vec<DMatrix<f64>>,
    /// Eigenvalues, nonincreasing, >= 0.
    pub nu: Vec<f64>,
    /// Positive scalar-product weights, one per dimension.
    pub weights: Vec<f64>,
}

impl EigenBasis {
    pub fn n_dims(&self) -> usize {
        self.psi.len()
    }

    pub fn n_components(&self) -> usize {
        self.psi.first().map_or(0, |p| p.ncols())
    }

    /// Linear interpolation of component values at `t` for one dimension
    /// (0-based). `t` must lie within the grid span.
    pub fn evaluate_at(&self, dim: usize, t: f64) -> Result<DVector<f64>, BasisError> {
        let grid = &self.grid;
        let (lo, hi) = (grid[0], grid[grid.len() - 1]);
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(BasisError::OutsideDomain(t, lo, hi));
        }
        let t = t.clamp(lo, hi);
        let j = match grid.binary_search_by(|g| g.total_cmp(&t)) {
            Ok(j) => return Ok(self.psi[dim].row(j).transpose()),
            Err(j) => j.clamp(1, grid.len() - 1),
        };
        let (t0, t1) = (grid[j - 1], grid[j]);
        let a = (t - t0) / (t1 - t0);
        let lower = self.psi[dim].row(j - 1);
        let upper = self.psi[dim].row(j);
        Ok((lower * (1.0 - a) + upper * a).transpose())
    }

    /// Evaluate one dimension at many times (rows) for all components.
    pub fn evaluate(&self, dim: usize, times: &[f64]) -> Result<DMatrix<f64>, BasisError> {
        let mut out = DMatrix::zeros(times.len(), self.n_components());
        for (r, &t) in times.iter().enumerate() {
            out.set_row(r, &self.evaluate_at(dim, t)?.transpose());
        }
        Ok(out)
    }

    /// Weighted Gram matrix of the eigenfunctions under trapezoid quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.n_components();
        let w = quad::trapezoid_weights(&self.grid);
        let mut gram = DMatrix::zeros(m, m);
        for (k, psi_k) in self.psi.iter().enumerate() {
            for a in 0..m {
                for b in a..m {
                    let mut acc = 0.0;
                    for (g, &wg) in w.iter().enumerate() {
                        acc += wg * psi_k[(g, a)] * psi_k[(g, b)];
                    }
                    gram[(a, b)] += self.weights[k] * acc;
                    if a != b {
                        gram[(b, a)] = gram[(a, b)];
                    }
                }
            }
        }
        gram
    }

    /// Keep only the first `m` components.
    pub fn truncated(&self, m: usize) -> EigenBasis {
        let m = m.min(self.n_components());
        EigenBasis {
            level: self.level,
            grid: self.grid.clone(),
            psi: self.psi.iter().map(|p| p.columns(0, m).into_owned()).collect(),
            nu: self.nu[..m.min(self.nu.len())].to_vec(),
            weights: self.weights.clone(),
        }
    }

    /// Single-dimension view with unit weight, as used by univariate models.
    pub fn restrict_dim(&self, dim: usize) -> EigenBasis {
        EigenBasis {
            level: self.level,
            grid: self.grid.clone(),
            psi: vec![self.psi[dim].clone()],
            nu: self.nu.clone(),
            weights: vec![1.0],
        }
    }
}

/// Deterministic sign convention: flip each component so its entry of
/// largest absolute value across the concatenated grid is positive.
pub(crate) fn fix_component_signs(psi: &mut [DMatrix<f64>]) {
    if psi.is_empty() {
        return;
    }
    for m in 0..psi[0].ncols() {
        let mut best = 0.0f64;
        for block in psi.iter() {
            for g in 0..block.nrows() {
                let v = block[(g, m)];
                if v.abs() > best.abs() {
                    best = v;
                }
            }
        }
        if best < 0.0 {
            for block in psi.iter_mut() {
                for g in 0..block.nrows() {
                    block[(g, m)] = -block[(g, m)];
                }
            }
        }
    }
}

/// Orthonormal Fourier basis function `idx` on `[0, span]`:
/// constant, then alternating sine/cosine pairs of increasing frequency.
fn fourier(idx: usize, x: f64, span: f64) -> f64 {
    if idx == 0 {
        return 1.0 / span.sqrt();
    }
    let pair = (idx + 1) / 2;
    let angle = 2.0 * std::f64::consts::PI * pair as f64 * x / span;
    let scale = (2.0 / span).sqrt();
    if idx % 2 == 1 {
        scale * angle.sin()
    } else {
        scale * angle.cos()
    }
}

/// Split-Fourier eigenbasis: each of the first `m` Fourier basis functions
/// on a `k`-fold extended interval is split into `k` parts, translated to
/// the common domain and reflected dimension-wise with probability 1/2.
/// The result is orthonormal under the unit-weight scalar product;
/// eigenvalues are attached by the caller.
pub fn split_fourier_eigenbasis<R: Rng>(
    m: usize,
    k: usize,
    grid: &[f64],
    rng: &mut R,
) -> EigenBasis {
    assert!(m >= 1 && k >= 1 && grid.len() >= 2);
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let len = hi - lo;
    let signs: Vec<f64> = (0..k)
        .map(|_| if rng.gen_bool(0.5) { -1.0 } else { 1.0 })
        .collect();
    let scale = 1.0 / len.sqrt();
    let psi = (0..k)
        .map(|dim| {
            DMatrix::from_fn(grid.len(), m, |g, comp| {
                let x = (grid[g] - lo) / len + dim as f64;
                signs[dim] * scale * fourier(comp, x, k as f64)
            })
        })
        .collect();
    EigenBasis {
        level: 0,
        grid: grid.to_vec(),
        psi,
        nu: vec![0.0; m],
        weights: vec![1.0; k],
    }
}
