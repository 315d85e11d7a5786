//! The generalized multivariate functional additive mixed model: design
//! assembly from a model specification, priors, backfitting
//! initialization, and MCMC posterior sampling.

pub mod backfit;
pub mod design;
pub mod mcmc;
pub mod model;
pub mod predict;
pub mod samples;
pub mod spec;

use thiserror::Error;

pub use backfit::backfit_init;
pub use design::{build_design, BlockPrior, CoefBlock, DesignBlocks, LatentBlock};
pub use mcmc::mcmc_sample;
pub use model::{log_posterior, loglik, FitState};
pub use predict::{
    coefficient_curve_draws, latent_curves_from_state, predict_theta, predictor_curves_from_state,
    PredictedCurve,
};
pub use samples::{block_max_rhat, BlockDraws, PosteriorSamples};
pub use spec::{BackfitConfig, DimSpec, LatentSpec, ModelSpec, SamplerConfig, TermSpec};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("model spec error: {0}")]
    Spec(String),
    #[error("design error: {0}")]
    Design(String),
    #[error("backfitting diverged; log-posterior trace: {trace:?}")]
    Divergence { trace: Vec<f64> },
    #[error("non-finite initial state")]
    NonFiniteInit,
    #[error("prediction error: {0}")]
    Prediction(String),
}

/// A complete fit: assembled design, backfitting mode, posterior samples.
pub struct FitResult {
    pub design: DesignBlocks,
    pub init: FitState,
    pub samples: PosteriorSamples,
}

/// Convenience front door: assemble the design, initialize by
/// backfitting, and sample the posterior.
pub fn fit_model(
    dataset: &crate::funcdata::MultivariateFunctionalDataset,
    spec: &ModelSpec,
    bases: &[crate::bases::EigenBasis],
    covariates: Option<&crate::funcdata::CovariateTable>,
    backfit_config: &BackfitConfig,
    sampler_config: &SamplerConfig,
) -> Result<FitResult, FitError> {
    let design = build_design(dataset, spec, bases, covariates)?;
    let init = backfit_init(&design, backfit_config)?;
    let samples = mcmc_sample(&design, &init, sampler_config)?;
    Ok(FitResult {
        design,
        init,
        samples,
    })
}
