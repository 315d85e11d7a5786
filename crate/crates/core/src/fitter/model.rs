//! Model state, additive-predictor bookkeeping, the log posterior, and
//! per-block derivative computations shared by backfitting and MCMC.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::fitter::design::{BlockPrior, DesignBlocks};
use crate::fitter::spec::{IG_RATE, IG_SHAPE};

/// All free parameters of one fit.
#[derive(Debug, Clone)]
pub struct FitState {
    /// eta[dim][param] over the dimension's rows.
    pub eta: Vec<Vec<DVector<f64>>>,
    /// Coefficients per coefficient block.
    pub coefs: Vec<DVector<f64>>,
    /// Scores per latent block: groups x m.
    pub scores: Vec<DMatrix<f64>>,
    /// Variance parameters per coefficient block (0..=2 entries).
    pub tau2: Vec<Vec<f64>>,
    /// Score variances per latent block.
    pub nu: Vec<Vec<f64>>,
}

impl FitState {
    pub fn init(design: &DesignBlocks) -> Self {
        let eta = design
            .rows
            .iter()
            .map(|r| {
                (0..r.family.n_params())
                    .map(|_| DVector::zeros(r.len()))
                    .collect()
            })
            .collect();
        let coefs = design
            .coef
            .iter()
            .map(|b| DVector::zeros(b.x.ncols()))
            .collect();
        let scores = design
            .latent
            .iter()
            .map(|l| DMatrix::zeros(l.groups.len(), l.m))
            .collect();
        let tau2 = design
            .coef
            .iter()
            .map(|b| vec![1.0; b.prior.n_tau()])
            .collect();
        let nu = design.latent.iter().map(|l| l.nu_init.clone()).collect();
        FitState {
            eta,
            coefs,
            scores,
            tau2,
            nu,
        }
    }

    /// Rebuild every predictor from the coefficients and scores.
    pub fn recompute_eta(&mut self, design: &DesignBlocks) {
        for (dim, r) in design.rows.iter().enumerate() {
            for e in self.eta[dim].iter_mut() {
                e.fill(0.0);
            }
            let _ = r;
        }
        for (i, block) in design.coef.iter().enumerate() {
            let contrib = &block.x * &self.coefs[i];
            self.eta[block.dim][block.param] += contrib;
        }
        for (u, latent) in design.latent.iter().enumerate() {
            for (g, group) in latent.groups.iter().enumerate() {
                let rho = self.scores[u].row(g).transpose();
                let contrib = &group.psi * rho;
                for (local, &(dim, row)) in group.rows.iter().enumerate() {
                    self.eta[dim][0][row] += contrib[local];
                }
            }
        }
    }

    /// Shift a coefficient block by `delta`, updating the predictors.
    pub fn apply_coef_delta(&mut self, design: &DesignBlocks, block: usize, delta: &DVector<f64>) {
        let b = &design.coef[block];
        let eta = &mut self.eta[b.dim][b.param];
        for r in 0..b.xs.n_rows() {
            eta[r] += b.xs.dot(r, delta);
        }
        self.coefs[block] += delta;
    }

    /// Shift one latent group's scores by `delta`, updating the predictors.
    pub fn apply_score_delta(
        &mut self,
        design: &DesignBlocks,
        block: usize,
        group: usize,
        delta: &DVector<f64>,
    ) {
        let g = &design.latent[block].groups[group];
        let m = design.latent[block].m;
        for (local, &(dim, row)) in g.rows.iter().enumerate() {
            let psi = g.psi_row(local, m);
            let mut acc = 0.0;
            for (j, &p) in psi.iter().enumerate() {
                acc += p * delta[j];
            }
            self.eta[dim][0][row] += acc;
        }
        for j in 0..delta.len() {
            self.scores[block][(group, j)] += delta[j];
        }
    }

    #[inline]
    pub fn eta_pair(&self, dim: usize, row: usize) -> [f64; 2] {
        let e1 = self.eta[dim][0][row];
        let e2 = if self.eta[dim].len() > 1 {
            self.eta[dim][1][row]
        } else {
            0.0
        };
        [e1, e2]
    }
}

/// Sum of scalar log-likelihood contributions over all rows.
pub fn loglik(design: &DesignBlocks, state: &FitState) -> f64 {
    let mut total = 0.0;
    for (dim, rows) in design.rows.iter().enumerate() {
        for r in 0..rows.len() {
            total += rows
                .family
                .ll_eta(rows.y[r], rows.lgy1[r], state.eta_pair(dim, r));
        }
    }
    total
}

/// Log-likelihood restricted to the rows of one dimension.
pub fn loglik_dim(design: &DesignBlocks, state: &FitState, dim: usize) -> f64 {
    let rows = &design.rows[dim];
    (0..rows.len())
        .map(|r| {
            rows.family
                .ll_eta(rows.y[r], rows.lgy1[r], state.eta_pair(dim, r))
        })
        .sum()
}

/// Log-likelihood restricted to one latent group's rows.
pub fn loglik_group(design: &DesignBlocks, state: &FitState, block: usize, group: usize) -> f64 {
    design.latent[block].groups[group]
        .rows
        .iter()
        .map(|&(dim, row)| {
            let rows = &design.rows[dim];
            rows.family
                .ll_eta(rows.y[row], rows.lgy1[row], state.eta_pair(dim, row))
        })
        .sum()
}

fn log_ig_density(v: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * v.ln() - rate / v
}

/// Full log posterior: likelihood, coefficient priors, score priors, and
/// inverse-Gamma hyperpriors on every variance parameter.
pub fn log_posterior(design: &DesignBlocks, state: &FitState) -> f64 {
    let mut lp = loglik(design, state);
    for (i, block) in design.coef.iter().enumerate() {
        lp += block.prior.log_density(&state.coefs[i], &state.tau2[i]);
        for &t2 in &state.tau2[i] {
            lp += log_ig_density(t2, IG_SHAPE, IG_RATE);
        }
    }
    for (u, latent) in design.latent.iter().enumerate() {
        let j = latent.groups.len() as f64;
        for m in 0..latent.m {
            let nu = state.nu[u][m];
            let ss: f64 = (0..latent.groups.len())
                .map(|g| state.scores[u][(g, m)] * state.scores[u][(g, m)])
                .sum();
            lp += -0.5 * j * (2.0 * std::f64::consts::PI * nu).ln() - ss / (2.0 * nu);
            lp += log_ig_density(nu, IG_SHAPE, IG_RATE);
        }
    }
    lp
}

/// Likelihood gradient and negative curvature of one coefficient block:
/// returns `(X' u, X' W X)` with `u` the per-row score and `W = -hess`.
pub fn coef_lik_derivs(
    design: &DesignBlocks,
    state: &FitState,
    block: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let b = &design.coef[block];
    let rows = &design.rows[b.dim];
    let d = b.xs.ncols;
    let mut grad = DVector::zeros(d);
    let mut curv = DMatrix::zeros(d, d);
    for r in 0..rows.len() {
        let (s, h) = rows
            .family
            .sh_eta(rows.y[r], state.eta_pair(b.dim, r), b.param);
        let w = -h;
        let (off, vals) = b.xs.row(r);
        for (ja, &xa) in vals.iter().enumerate() {
            let a = off + ja;
            grad[a] += s * xa;
            let wxa = w * xa;
            for (jc, &xc) in vals[..=ja].iter().enumerate() {
                curv[(a, off + jc)] += wxa * xc;
            }
        }
    }
    for a in 0..d {
        for c in a + 1..d {
            curv[(a, c)] = curv[(c, a)];
        }
    }
    (grad, curv)
}

/// Likelihood gradient and negative curvature of one latent group's score
/// vector.
pub fn score_lik_derivs(
    design: &DesignBlocks,
    state: &FitState,
    block: usize,
    group: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let g = &design.latent[block].groups[group];
    let m = design.latent[block].m;
    let mut grad = DVector::zeros(m);
    let mut curv = DMatrix::zeros(m, m);
    for (local, &(dim, row)) in g.rows.iter().enumerate() {
        let rows = &design.rows[dim];
        let (s, h) = rows.family.sh_eta(rows.y[row], state.eta_pair(dim, row), 0);
        let w = -h;
        let psi = g.psi_row(local, m);
        for (a, &xa) in psi.iter().enumerate() {
            grad[a] += s * xa;
            let wxa = w * xa;
            for (c, &xc) in psi[..=a].iter().enumerate() {
                curv[(a, c)] += wxa * xc;
            }
        }
    }
    for a in 0..m {
        for c in a + 1..m {
            curv[(a, c)] = curv[(c, a)];
        }
    }
    (grad, curv)
}

/// Gradient of the log prior of a coefficient block (`-K beta`).
pub fn coef_prior_grad(
    prior: &BlockPrior,
    beta: &DVector<f64>,
    tau2: &[f64],
) -> DVector<f64> {
    -(prior.precision(tau2, beta.len()) * beta)
}
