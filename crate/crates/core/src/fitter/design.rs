//! Design assembly: realize a model specification against a dataset as
//! per-block design matrices, penalties and latent-process structures.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::bases::{
    bspline_design, cyclic_difference_penalty, difference_penalty, kronecker, row_tensor,
    EigenBasis, PenaltyMatrix,
};
use crate::families::Family;
use crate::fitter::spec::{LatentSpec, ModelSpec, TermSpec, VAGUE_SD};
use crate::fitter::FitError;
use crate::funcdata::{CovariateTable, Interval, MultivariateFunctionalDataset};

/// Scalar observations of one dimension in canonical row order.
#[derive(Debug, Clone)]
pub struct DimRows {
    pub family: Family,
    pub y: Vec<f64>,
    /// Precomputed `ln Gamma(y + 1)` per row.
    pub lgy1: Vec<f64>,
    pub unit: Vec<usize>,
    pub t: Vec<f64>,
}

impl DimRows {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Prior attached to one coefficient block.
#[derive(Debug, Clone)]
pub enum BlockPrior {
    /// N(0, sd^2 I), no variance parameter.
    Vague { sd: f64 },
    /// Partially improper Gaussian with precision `penalty / tau2`.
    Single {
        penalty: DMatrix<f64>,
        rank: usize,
        log_pdet: f64,
    },
    /// Two-penalty anisotropic prior with precision
    /// `px / tau2_x + pt / tau2_t`; the co-diagonalized eigenvalue pairs
    /// drive the pseudo-determinant.
    Aniso {
        px: DMatrix<f64>,
        pt: DMatrix<f64>,
        /// (lambda_x, lambda_t) for every pair outside the joint null space.
        eig_pairs: Vec<(f64, f64)>,
    },
}

impl BlockPrior {
    pub fn n_tau(&self) -> usize {
        match self {
            BlockPrior::Vague { .. } => 0,
            BlockPrior::Single { .. } => 1,
            BlockPrior::Aniso { .. } => 2,
        }
    }

    /// Precision matrix at the given variance parameters.
    pub fn precision(&self, tau2: &[f64], d: usize) -> DMatrix<f64> {
        match self {
            BlockPrior::Vague { sd } => DMatrix::identity(d, d) / (sd * sd),
            BlockPrior::Single { penalty, .. } => penalty / tau2[0],
            BlockPrior::Aniso { px, pt, .. } => px / tau2[0] + pt / tau2[1],
        }
    }

    /// Log density of the (partially improper) Gaussian prior at `beta`,
    /// including the variance-dependent pseudo-determinant terms.
    pub fn log_density(&self, beta: &DVector<f64>, tau2: &[f64]) -> f64 {
        let d = beta.len() as f64;
        match self {
            BlockPrior::Vague { sd } => {
                -0.5 * d * (2.0 * std::f64::consts::PI * sd * sd).ln()
                    - beta.norm_squared() / (2.0 * sd * sd)
            }
            BlockPrior::Single {
                penalty,
                rank,
                log_pdet,
            } => {
                let quad = (beta.transpose() * penalty * beta)[(0, 0)];
                0.5 * (*rank as f64) * (1.0 / tau2[0]).ln() + 0.5 * log_pdet
                    - 0.5 * (*rank as f64) * (2.0 * std::f64::consts::PI).ln()
                    - quad / (2.0 * tau2[0])
            }
            BlockPrior::Aniso { px, pt, eig_pairs } => {
                let qx = (beta.transpose() * px * beta)[(0, 0)];
                let qt = (beta.transpose() * pt * beta)[(0, 0)];
                let mut log_pdet = 0.0;
                for &(lx, lt) in eig_pairs {
                    log_pdet += (lx / tau2[0] + lt / tau2[1]).ln();
                }
                0.5 * log_pdet - 0.5 * eig_pairs.len() as f64 * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * (qx / tau2[0] + qt / tau2[1])
            }
        }
    }
}

/// How to re-evaluate a term's design on new inputs.
#[derive(Debug, Clone)]
pub enum TermRealization {
    Constant {
        covariate: Option<String>,
    },
    Functional {
        covariate: Option<String>,
        interior: usize,
        degree: usize,
        cyclic: bool,
        domain: Interval,
    },
    Tensor {
        covariate: String,
        x_interior: usize,
        degree: usize,
        x_domain: Interval,
        /// Sum-to-zero constraint transform of the covariate margin.
        z: DMatrix<f64>,
        t_interior: usize,
        cyclic: bool,
        domain: Interval,
    },
}

impl TermRealization {
    pub fn covariate(&self) -> Option<&str> {
        match self {
            TermRealization::Constant { covariate } => covariate.as_deref(),
            TermRealization::Functional { covariate, .. } => covariate.as_deref(),
            TermRealization::Tensor { covariate, .. } => Some(covariate),
        }
    }

    /// Design rows for a single unit with covariate value `x` at `times`.
    pub fn design(&self, x: f64, times: &[f64]) -> Result<DMatrix<f64>, FitError> {
        match self {
            TermRealization::Constant { covariate } => {
                let v = if covariate.is_some() { x } else { 1.0 };
                Ok(DMatrix::from_element(times.len(), 1, v))
            }
            TermRealization::Functional {
                covariate,
                interior,
                degree,
                cyclic,
                domain,
            } => {
                let mut b = bspline_design(*interior, *degree, times, *cyclic, *domain)
                    .map_err(|e| FitError::Design(e.to_string()))?
                    .values;
                if covariate.is_some() {
                    b *= x;
                }
                Ok(b)
            }
            TermRealization::Tensor {
                x_interior,
                degree,
                x_domain,
                z,
                t_interior,
                cyclic,
                domain,
                ..
            } => {
                let bx = bspline_design(*x_interior, *degree, &[x], false, *x_domain)
                    .map_err(|e| FitError::Design(e.to_string()))?
                    .values
                    * z;
                let bt = bspline_design(*t_interior, *degree, times, *cyclic, *domain)
                    .map_err(|e| FitError::Design(e.to_string()))?
                    .values;
                let bx_rows = DMatrix::from_fn(times.len(), bx.ncols(), |_, c| bx[(0, c)]);
                row_tensor(&bx_rows, &bt).map_err(|e| FitError::Design(e.to_string()))
            }
        }
    }
}

/// Row-compressed design storage: per row the contiguous span of nonzero
/// columns (B-spline rows have `degree + 1` of them).
#[derive(Debug, Clone)]
pub struct SparseRows {
    pub ncols: usize,
    pub offsets: Vec<u32>,
    pub starts: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRows {
    pub fn from_dense(x: &DMatrix<f64>) -> Self {
        let (n, d) = x.shape();
        let mut offsets = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n + 1);
        let mut values = Vec::new();
        starts.push(0);
        for r in 0..n {
            let mut lo = d;
            let mut hi = 0;
            for c in 0..d {
                if x[(r, c)] != 0.0 {
                    lo = lo.min(c);
                    hi = hi.max(c + 1);
                }
            }
            if lo >= hi {
                lo = 0;
                hi = 0;
            }
            offsets.push(lo as u32);
            for c in lo..hi {
                values.push(x[(r, c)]);
            }
            starts.push(values.len());
        }
        SparseRows {
            ncols: d,
            offsets,
            starts,
            values,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> (usize, &[f64]) {
        (
            self.offsets[r] as usize,
            &self.values[self.starts[r]..self.starts[r + 1]],
        )
    }

    #[inline]
    pub fn dot(&self, r: usize, v: &DVector<f64>) -> f64 {
        let (off, vals) = self.row(r);
        vals.iter()
            .enumerate()
            .map(|(j, &x)| x * v[off + j])
            .sum()
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len()
    }
}

/// One coefficient block: a term realized over the rows of one dimension
/// and one distributional parameter.
#[derive(Debug, Clone)]
pub struct CoefBlock {
    pub name: String,
    pub dim: usize,
    pub param: usize,
    pub x: DMatrix<f64>,
    pub xs: SparseRows,
    pub prior: BlockPrior,
    pub realization: TermRealization,
}

/// Rows of one latent group (a unit for level 0, a group for level 1)
/// with the eigenfunctions evaluated at each row's (dimension, time).
#[derive(Debug, Clone)]
pub struct LatentGroup {
    pub rows: Vec<(usize, usize)>,
    pub psi: DMatrix<f64>,
    /// Row-major copy of `psi` for contiguous per-row access.
    pub psi_rows: Vec<f64>,
}

impl LatentGroup {
    #[inline]
    pub fn psi_row(&self, local: usize, m: usize) -> &[f64] {
        &self.psi_rows[local * m..(local + 1) * m]
    }
}

/// One latent process realized over the dataset.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub level: usize,
    pub m: usize,
    pub groups: Vec<LatentGroup>,
    pub nu_init: Vec<f64>,
    pub basis: EigenBasis,
}

/// Fully assembled design for one model fit.
#[derive(Debug, Clone)]
pub struct DesignBlocks {
    pub rows: Vec<DimRows>,
    pub coef: Vec<CoefBlock>,
    pub latent: Vec<LatentBlock>,
    pub unit_ids: Vec<String>,
    pub unit_groups: Vec<Option<usize>>,
    pub group_ids: Vec<String>,
    pub domain: Interval,
}

impl DesignBlocks {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn n_params(&self, dim: usize) -> usize {
        self.rows[dim].family.n_params()
    }

    pub fn block_by_name(&self, name: &str) -> Option<(usize, &CoefBlock)> {
        self.coef
            .iter()
            .enumerate()
            .find(|(_, b)| b.name == name)
    }
}

fn covariate_values(
    dataset: &MultivariateFunctionalDataset,
    covariates: Option<&CovariateTable>,
    name: &str,
) -> Result<Vec<f64>, FitError> {
    let table =
        covariates.ok_or_else(|| FitError::Spec(format!("covariate `{name}` requested but no covariate table supplied")))?;
    dataset
        .unit_ids()
        .iter()
        .map(|u| {
            table
                .value(u, name)
                .ok_or_else(|| FitError::Spec(format!("unknown covariate `{name}` for unit `{u}`")))
        })
        .collect()
}

fn positive_eigenvalues(p: &DMatrix<f64>) -> (Vec<f64>, usize, f64) {
    let eig = p.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-10 * max.max(1.0);
    let mut eigs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigs.iter_mut().for_each(|l| {
        if l.abs() <= tol {
            *l = 0.0
        }
    });
    let rank = eigs.iter().filter(|&&l| l > 0.0).count();
    let log_pdet = eigs.iter().filter(|&&l| l > 0.0).map(|l| l.ln()).sum();
    (eigs, rank, log_pdet)
}

/// Householder null-space basis of a single constraint vector `c`:
/// columns orthonormal with `c' Z = 0`.
fn constraint_null_space(c: &DVector<f64>) -> DMatrix<f64> {
    let d = c.len();
    let mut v = c.clone();
    let alpha = -c[0].signum() * c.norm();
    v[0] -= alpha;
    let vtv = v.norm_squared();
    let mut h = DMatrix::identity(d, d);
    if vtv > 1e-300 {
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] -= 2.0 * v[i] * v[j] / vtv;
            }
        }
    }
    h.columns(1, d - 1).into_owned()
}

struct TermBuild {
    x: DMatrix<f64>,
    prior: BlockPrior,
    realization: TermRealization,
}

fn build_term(
    term: &TermSpec,
    dataset: &MultivariateFunctionalDataset,
    covariates: Option<&CovariateTable>,
    rows: &DimRows,
    domain: Interval,
) -> Result<TermBuild, FitError> {
    let degree = term.spline_degree();
    let t_basis = |d_t: usize, order: usize, cyclic: bool| -> Result<(DMatrix<f64>, PenaltyMatrix), FitError> {
        let interior = if cyclic {
            d_t
        } else {
            if d_t <= degree + 1 {
                return Err(FitError::Spec(format!(
                    "d_t = {d_t} too small for degree {degree}"
                )));
            }
            d_t - degree - 1
        };
        let b = bspline_design(interior, degree, &rows.t, cyclic, domain)
            .map_err(|e| FitError::Design(e.to_string()))?;
        let p = if cyclic {
            cyclic_difference_penalty(d_t, order)
        } else {
            difference_penalty(d_t, order)
        }
        .map_err(|e| FitError::Design(e.to_string()))?;
        Ok((b.values, p))
    };

    match term {
        TermSpec::Constant { covariate } => {
            let x = match covariate {
                None => DMatrix::from_element(rows.len(), 1, 1.0),
                Some(name) => {
                    let values = covariate_values(dataset, covariates, name)?;
                    DMatrix::from_fn(rows.len(), 1, |r, _| values[rows.unit[r]])
                }
            };
            Ok(TermBuild {
                x,
                prior: BlockPrior::Vague { sd: VAGUE_SD },
                realization: TermRealization::Constant {
                    covariate: covariate.clone(),
                },
            })
        }
        TermSpec::FunctionalIntercept {
            d_t,
            order_t,
            cyclic,
        } => {
            let (x, p) = t_basis(*d_t, *order_t, *cyclic)?;
            let (_, rank, log_pdet) = positive_eigenvalues(&p.values);
            let interior = if *cyclic { *d_t } else { d_t - degree - 1 };
            Ok(TermBuild {
                x,
                prior: BlockPrior::Single {
                    penalty: p.values,
                    rank,
                    log_pdet,
                },
                realization: TermRealization::Functional {
                    covariate: None,
                    interior,
                    degree,
                    cyclic: *cyclic,
                    domain,
                },
            })
        }
        TermSpec::LinearFunctional {
            covariate,
            d_t,
            order_t,
            cyclic,
        } => {
            let values = covariate_values(dataset, covariates, covariate)?;
            let (mut x, p) = t_basis(*d_t, *order_t, *cyclic)?;
            for r in 0..x.nrows() {
                let v = values[rows.unit[r]];
                for c in 0..x.ncols() {
                    x[(r, c)] *= v;
                }
            }
            let (_, rank, log_pdet) = positive_eigenvalues(&p.values);
            let interior = if *cyclic { *d_t } else { d_t - degree - 1 };
            Ok(TermBuild {
                x,
                prior: BlockPrior::Single {
                    penalty: p.values,
                    rank,
                    log_pdet,
                },
                realization: TermRealization::Functional {
                    covariate: Some(covariate.clone()),
                    interior,
                    degree,
                    cyclic: *cyclic,
                    domain,
                },
            })
        }
        TermSpec::SmoothInteraction {
            covariate,
            d_x,
            order_x,
            d_t,
            order_t,
            cyclic,
        } => {
            let values = covariate_values(dataset, covariates, covariate)?;
            let lo = values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if !(hi > lo) {
                return Err(FitError::Spec(format!(
                    "covariate `{covariate}` is constant; a smooth interaction is unidentified"
                )));
            }
            let x_domain = Interval::new(lo, hi);
            if *d_x <= degree + 1 {
                return Err(FitError::Spec(format!(
                    "d_x = {d_x} too small for degree {degree}"
                )));
            }
            let x_interior = d_x - degree - 1;
            let bx_units = bspline_design(x_interior, degree, &values, false, x_domain)
                .map_err(|e| FitError::Design(e.to_string()))?
                .values;
            // sum-to-zero for all t over the observed units
            let colsums = DVector::from_fn(*d_x, |j, _| bx_units.column(j).sum());
            let z = constraint_null_space(&colsums);
            let px_marg = {
                let p = difference_penalty(*d_x, *order_x)
                    .map_err(|e| FitError::Design(e.to_string()))?;
                z.transpose() * p.values * &z
            };
            let (bt, pt_marg) = t_basis(*d_t, *order_t, *cyclic)?;
            let bx_rows = {
                let constrained = &bx_units * &z;
                DMatrix::from_fn(rows.len(), constrained.ncols(), |r, c| {
                    constrained[(rows.unit[r], c)]
                })
            };
            let x = row_tensor(&bx_rows, &bt).map_err(|e| FitError::Design(e.to_string()))?;

            let (ex, _, _) = positive_eigenvalues(&px_marg);
            let (et, _, _) = positive_eigenvalues(&pt_marg.values);
            let mut eig_pairs = Vec::new();
            for &lx in &ex {
                for &lt in &et {
                    if lx > 0.0 || lt > 0.0 {
                        eig_pairs.push((lx, lt));
                    }
                }
            }
            let dxc = z.ncols();
            let dt = pt_marg.dim();
            let px = kronecker(&px_marg, &DMatrix::identity(dt, dt));
            let pt = kronecker(&DMatrix::identity(dxc, dxc), &pt_marg.values);
            let interior_t = if *cyclic { *d_t } else { d_t - degree - 1 };
            Ok(TermBuild {
                x,
                prior: BlockPrior::Aniso { px, pt, eig_pairs },
                realization: TermRealization::Tensor {
                    covariate: covariate.clone(),
                    x_interior,
                    degree,
                    x_domain,
                    z,
                    t_interior: interior_t,
                    cyclic: *cyclic,
                    domain,
                },
            })
        }
    }
}

fn build_latent(
    spec: &LatentSpec,
    dataset: &MultivariateFunctionalDataset,
    rows: &[DimRows],
    bases: &[EigenBasis],
) -> Result<LatentBlock, FitError> {
    let basis = bases
        .iter()
        .find(|b| b.level == spec.level)
        .ok_or_else(|| FitError::Spec(format!("no eigenbasis supplied for level {}", spec.level)))?;
    if basis.n_dims() != dataset.k() {
        return Err(FitError::Design(format!(
            "eigenbasis for level {} covers {} dimensions, dataset has {}",
            spec.level,
            basis.n_dims(),
            dataset.k()
        )));
    }
    let basis = match spec.m {
        Some(m) => basis.truncated(m),
        None => basis.clone(),
    };
    let m = basis.n_components();
    if m == 0 {
        return Err(FitError::Spec(format!(
            "eigenbasis for level {} has no components",
            spec.level
        )));
    }
    let n_groups = match spec.level {
        0 => dataset.n_units(),
        1 => {
            if dataset.layers() < 2 {
                return Err(FitError::Design(
                    "latent level 1 requested but the dataset declares no grouping layer".into(),
                ));
            }
            dataset.n_groups()
        }
        other => {
            return Err(FitError::Spec(format!(
                "unsupported latent level {other}; one nested layer is the maximum"
            )))
        }
    };
    let group_of_unit: Vec<usize> = (0..dataset.n_units())
        .map(|u| match spec.level {
            0 => u,
            _ => dataset.unit_group(u).expect("validated above"),
        })
        .collect();

    let mut groups: Vec<(Vec<(usize, usize)>, Vec<f64>, Vec<usize>)> =
        vec![(Vec::new(), Vec::new(), Vec::new()); n_groups];
    for (dim, dim_rows) in rows.iter().enumerate() {
        for r in 0..dim_rows.len() {
            let g = group_of_unit[dim_rows.unit[r]];
            groups[g].0.push((dim, r));
            groups[g].1.push(dim_rows.t[r]);
            groups[g].2.push(dim);
        }
    }
    let mut out = Vec::with_capacity(n_groups);
    for (row_ids, ts, dims) in groups {
        let mut psi = DMatrix::zeros(row_ids.len(), m);
        let mut psi_rows = Vec::with_capacity(row_ids.len() * m);
        for (local, (&_row, (&t, &dim))) in row_ids
            .iter()
            .zip(ts.iter().zip(dims.iter()))
            .enumerate()
        {
            let values = basis
                .evaluate_at(dim, t)
                .map_err(|e| FitError::Design(format!("eigenbasis evaluation: {e}")))?;
            psi.set_row(local, &values.transpose());
            psi_rows.extend(values.iter());
        }
        out.push(LatentGroup {
            rows: row_ids,
            psi,
            psi_rows,
        });
    }
    // neutral start for the score variances: the sampler and the AICc
    // grid adapt them, and initialization must not leak eigenvalue
    // information into the fit
    Ok(LatentBlock {
        level: spec.level,
        m,
        groups: out,
        nu_init: vec![1.0; m],
        basis,
    })
}

/// Realize a model specification against a dataset: evaluated design
/// matrices, penalties, and latent-process structure, rows grouped by
/// dimension then unit then time.
pub fn build_design(
    dataset: &MultivariateFunctionalDataset,
    spec: &ModelSpec,
    bases: &[EigenBasis],
    covariates: Option<&CovariateTable>,
) -> Result<DesignBlocks, FitError> {
    if spec.dims.len() != dataset.k() {
        return Err(FitError::Spec(format!(
            "model spec covers {} dimensions, dataset has {}",
            spec.dims.len(),
            dataset.k()
        )));
    }
    for (dim, d) in spec.dims.iter().enumerate() {
        if d.family != dataset.family(dim) {
            return Err(FitError::Spec(format!(
                "family mismatch on dimension {}: spec {} vs data {}",
                dim + 1,
                d.family.name(),
                dataset.family(dim).name()
            )));
        }
        if d.params.len() > d.family.n_params() {
            return Err(FitError::Spec(format!(
                "dimension {} declares {} predictors but {} has {}",
                dim + 1,
                d.params.len(),
                d.family.name(),
                d.family.n_params()
            )));
        }
    }

    let rows: Vec<DimRows> = (0..dataset.k())
        .map(|dim| {
            let obs = dataset.dim_observations(dim);
            DimRows {
                family: dataset.family(dim),
                y: obs.iter().map(|o| o.y).collect(),
                lgy1: obs.iter().map(|o| ln_gamma(o.y + 1.0)).collect(),
                unit: obs.iter().map(|o| o.unit).collect(),
                t: obs.iter().map(|o| o.t).collect(),
            }
        })
        .collect();

    let mut coef = Vec::new();
    for (dim, d) in spec.dims.iter().enumerate() {
        for (param, terms) in d.params.iter().enumerate() {
            for term in terms {
                let built = build_term(term, dataset, covariates, &rows[dim], spec.domain)?;
                coef.push(CoefBlock {
                    name: format!("k{}/r{}/{}", dim + 1, param + 1, term.label()),
                    dim,
                    param,
                    xs: SparseRows::from_dense(&built.x),
                    x: built.x,
                    prior: built.prior,
                    realization: built.realization,
                });
            }
        }
    }

    let mut latent = Vec::new();
    for l in &spec.latent {
        latent.push(build_latent(l, dataset, &rows, bases)?);
    }

    Ok(DesignBlocks {
        rows,
        coef,
        latent,
        unit_ids: dataset.unit_ids().to_vec(),
        unit_groups: (0..dataset.n_units())
            .map(|u| dataset.unit_group(u))
            .collect(),
        group_ids: dataset.group_ids().to_vec(),
        domain: spec.domain,
    })
}
