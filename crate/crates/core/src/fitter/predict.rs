//! Prediction: evaluate fitted additive predictors and distributional
//! parameters on new time grids, with pointwise means and credible
//! quantiles computed draw-wise (transform first, average after).

use nalgebra::DMatrix;

use crate::evaluate::empirical_quantile;
use crate::fitter::design::DesignBlocks;
use crate::fitter::model::FitState;
use crate::fitter::samples::PosteriorSamples;
use crate::fitter::FitError;
use crate::funcdata::CovariateTable;

fn covariate_for(
    design: &DesignBlocks,
    covariates: Option<&CovariateTable>,
    unit: &str,
    name: Option<&str>,
) -> Result<f64, FitError> {
    match name {
        None => Ok(1.0),
        Some(n) => covariates
            .and_then(|t| t.value(unit, n))
            .ok_or_else(|| {
                let _ = design;
                FitError::Prediction(format!("no covariate `{n}` for prediction unit `{unit}`"))
            }),
    }
}

/// Additive predictors of one unit evaluated at `times` for a given
/// parameter state; returns `eta[dim][param]` as vectors over times.
pub fn predictor_curves_from_state(
    design: &DesignBlocks,
    state: &FitState,
    unit: &str,
    covariates: Option<&CovariateTable>,
    times: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>, FitError> {
    let mut eta: Vec<Vec<Vec<f64>>> = design
        .rows
        .iter()
        .map(|r| vec![vec![0.0; times.len()]; r.family.n_params()])
        .collect();
    for (i, block) in design.coef.iter().enumerate() {
        let x_val = covariate_for(design, covariates, unit, block.realization.covariate())?;
        let x = block.realization.design(x_val, times)?;
        let contrib = x * &state.coefs[i];
        for (g, v) in contrib.iter().enumerate() {
            eta[block.dim][block.param][g] += v;
        }
    }
    for (u, latent) in design.latent.iter().enumerate() {
        let group = latent_group_index(design, u, unit)?;
        for dim in 0..design.k() {
            let psi = latent
                .basis
                .evaluate(dim, times)
                .map_err(|e| FitError::Prediction(e.to_string()))?;
            let rho = state.scores[u].row(group).transpose();
            let contrib = psi * rho;
            for (g, v) in contrib.iter().enumerate() {
                eta[dim][0][g] += v;
            }
        }
    }
    Ok(eta)
}

/// Latent-process values of one unit from a state, per dimension.
pub fn latent_curves_from_state(
    design: &DesignBlocks,
    state: &FitState,
    unit: &str,
    times: &[f64],
) -> Result<Vec<Vec<f64>>, FitError> {
    let mut out = vec![vec![0.0; times.len()]; design.k()];
    for (u, latent) in design.latent.iter().enumerate() {
        let group = latent_group_index(design, u, unit)?;
        for dim in 0..design.k() {
            let psi = latent
                .basis
                .evaluate(dim, times)
                .map_err(|e| FitError::Prediction(e.to_string()))?;
            let rho = state.scores[u].row(group).transpose();
            let contrib = psi * rho;
            for (g, v) in contrib.iter().enumerate() {
                out[dim][g] += v;
            }
        }
    }
    Ok(out)
}

fn latent_group_index(design: &DesignBlocks, block: usize, unit: &str) -> Result<usize, FitError> {
    let unit_idx = design
        .unit_ids
        .iter()
        .position(|u| u == unit)
        .ok_or_else(|| FitError::Prediction(format!("unknown unit `{unit}`")))?;
    match design.latent[block].level {
        0 => Ok(unit_idx),
        _ => design.unit_groups[unit_idx]
            .ok_or_else(|| FitError::Prediction(format!("unit `{unit}` has no group"))),
    }
}

/// Coefficient-function draws of a named block on a grid: each retained
/// draw's `B(t)' beta`, one row per draw.
pub fn coefficient_curve_draws(
    design: &DesignBlocks,
    samples: &PosteriorSamples,
    block_name: &str,
    times: &[f64],
) -> Result<DMatrix<f64>, FitError> {
    let (idx, block) = design
        .block_by_name(block_name)
        .ok_or_else(|| FitError::Prediction(format!("unknown block `{block_name}`")))?;
    let basis = block.realization.design(1.0, times)?;
    let draws = &samples.coef[idx].draws;
    Ok(draws * basis.transpose())
}

/// One predicted distributional-parameter curve with credible bands.
#[derive(Debug, Clone)]
pub struct PredictedCurve {
    pub dim: usize,
    pub param: usize,
    pub unit: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    /// (probability, pointwise quantile values)
    pub quantiles: Vec<(f64, Vec<f64>)>,
}

/// Predict distributional parameters for in-sample units: per draw compute
/// eta, map through the links, then summarize pointwise.
pub fn predict_theta(
    design: &DesignBlocks,
    samples: &PosteriorSamples,
    units: &[String],
    covariates: Option<&CovariateTable>,
    times: &[f64],
    quantiles: &[f64],
) -> Result<Vec<PredictedCurve>, FitError> {
    let n_draws = samples.n_draws();
    let mut out = Vec::new();
    for unit in units {
        if !design.unit_ids.iter().any(|u| u == unit) {
            return Err(FitError::Prediction(format!("unknown unit `{unit}`")));
        }
        // per-term design matrices for this unit
        let mut term_designs = Vec::with_capacity(design.coef.len());
        for block in &design.coef {
            let x_val = covariate_for(design, covariates, unit, block.realization.covariate())?;
            term_designs.push(block.realization.design(x_val, times)?);
        }
        let mut latent_psi = Vec::new();
        for (u, latent) in design.latent.iter().enumerate() {
            let group = latent_group_index(design, u, unit)?;
            let per_dim: Vec<DMatrix<f64>> = (0..design.k())
                .map(|dim| latent.basis.evaluate(dim, times))
                .collect::<Result<_, _>>()
                .map_err(|e| FitError::Prediction(e.to_string()))?;
            latent_psi.push((u, group, per_dim));
        }
        for dim in 0..design.k() {
            let family = design.rows[dim].family;
            for param in 0..family.n_params() {
                // draws x times predictor matrix
                let mut eta = DMatrix::zeros(n_draws, times.len());
                for (i, block) in design.coef.iter().enumerate() {
                    if block.dim != dim || block.param != param {
                        continue;
                    }
                    eta += &samples.coef[i].draws * term_designs[i].transpose();
                }
                if param == 0 {
                    for (u, group, per_dim) in &latent_psi {
                        let m = design.latent[*u].m;
                        let cols = samples.scores[*u]
                            .draws
                            .columns(group * m, m)
                            .into_owned();
                        eta += cols * per_dim[dim].transpose();
                    }
                }
                let link = family.links()[param];
                let theta = eta.map(|e| link.apply(e));
                let mean: Vec<f64> = (0..times.len())
                    .map(|g| theta.column(g).sum() / n_draws as f64)
                    .collect();
                let mut qs = Vec::with_capacity(quantiles.len());
                for &p in quantiles {
                    let mut vals = vec![0.0; times.len()];
                    let mut buf = vec![0.0; n_draws];
                    for g in 0..times.len() {
                        for (r, slot) in buf.iter_mut().enumerate() {
                            *slot = theta[(r, g)];
                        }
                        buf.sort_by(f64::total_cmp);
                        vals[g] = empirical_quantile(&buf, p);
                    }
                    qs.push((p, vals));
                }
                out.push(PredictedCurve {
                    dim,
                    param,
                    unit: unit.clone(),
                    times: times.to_vec(),
                    mean,
                    quantiles: qs,
                });
            }
        }
    }
    Ok(out)
}
