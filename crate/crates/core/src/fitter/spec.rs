//! Model specification: per-dimension, per-parameter additive term lists
//! plus latent-process declarations and sampler configuration. The JSON
//! form of these types is the CLI's model-spec format.

use serde::{Deserialize, Serialize};

use crate::families::Family;
use crate::funcdata::Interval;

fn default_degree() -> usize {
    3
}
fn default_order() -> usize {
    2
}

/// One additive term of a predictor. Marginal bases are cubic B-splines
/// with difference penalties unless stated otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermSpec {
    /// Single unpenalized column: the constant 1 or a unit covariate.
    Constant {
        #[serde(default)]
        covariate: Option<String>,
    },
    /// Smooth function of time, one penalized spline margin.
    FunctionalIntercept {
        d_t: usize,
        #[serde(default = "default_order")]
        order_t: usize,
        #[serde(default)]
        cyclic: bool,
    },
    /// Covariate times a smooth function of time.
    LinearFunctional {
        covariate: String,
        d_t: usize,
        #[serde(default = "default_order")]
        order_t: usize,
        #[serde(default)]
        cyclic: bool,
    },
    /// Anisotropic tensor-product smooth in (covariate, time), centered
    /// against the functional intercept by a sum-to-zero-for-all-t
    /// constraint on the covariate margin.
    SmoothInteraction {
        covariate: String,
        d_x: usize,
        #[serde(default = "default_order")]
        order_x: usize,
        d_t: usize,
        #[serde(default = "default_order")]
        order_t: usize,
        #[serde(default)]
        cyclic: bool,
    },
}

impl TermSpec {
    pub fn label(&self) -> String {
        match self {
            TermSpec::Constant { covariate: None } => "constant".into(),
            TermSpec::Constant {
                covariate: Some(c), ..
            } => format!("constant[{c}]"),
            TermSpec::FunctionalIntercept { .. } => "intercept(t)".into(),
            TermSpec::LinearFunctional { covariate, .. } => format!("linear[{covariate}](t)"),
            TermSpec::SmoothInteraction { covariate, .. } => format!("smooth[{covariate},t]"),
        }
    }

    pub fn spline_degree(&self) -> usize {
        default_degree()
    }
}

/// Latent-process declaration: which grouping layer it acts on and an
/// optional truncation of the supplied eigenbasis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    /// 0 = per-unit process, 1 = nested group layer.
    pub level: usize,
    /// Keep only the leading `m` components of the eigenbasis.
    #[serde(default)]
    pub m: Option<usize>,
}

/// Terms for every distributional parameter of one dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimSpec {
    pub family: Family,
    /// `params[r]` lists the terms of predictor r (location first).
    pub params: Vec<Vec<TermSpec>>,
}

/// Full model specification for one fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub domain: Interval,
    pub dims: Vec<DimSpec>,
    #[serde(default)]
    pub latent: Vec<LatentSpec>,
}

impl ModelSpec {
    pub fn new(domain: Interval, families: &[Family]) -> Self {
        ModelSpec {
            domain,
            dims: families
                .iter()
                .map(|&family| DimSpec {
                    family,
                    params: (0..family.n_params()).map(|_| Vec::new()).collect(),
                })
                .collect(),
            latent: Vec::new(),
        }
    }

    /// Add a term to dimension `dim` (0-based), parameter `param` (0-based).
    pub fn with_term(mut self, dim: usize, param: usize, term: TermSpec) -> Self {
        self.dims[dim].params[param].push(term);
        self
    }

    pub fn with_latent(mut self, latent: LatentSpec) -> Self {
        self.latent.push(latent);
        self
    }

    /// The reference simulation model: functional intercept and linear
    /// functional effect of `x` on every location predictor, constant and
    /// linear-in-`z` terms on the Gaussian scale predictor, one per-unit
    /// latent process.
    pub fn simulation(families: &[Family]) -> Self {
        let mut spec = ModelSpec::new(Interval::new(0.0, 1.0), families);
        for dim in 0..families.len() {
            spec = spec
                .with_term(
                    dim,
                    0,
                    TermSpec::FunctionalIntercept {
                        d_t: 14,
                        order_t: 2,
                        cyclic: false,
                    },
                )
                .with_term(
                    dim,
                    0,
                    TermSpec::LinearFunctional {
                        covariate: "x".into(),
                        d_t: 14,
                        order_t: 2,
                        cyclic: false,
                    },
                );
            if families[dim].n_params() > 1 {
                spec = spec
                    .with_term(dim, 1, TermSpec::Constant { covariate: None })
                    .with_term(
                        dim,
                        1,
                        TermSpec::Constant {
                            covariate: Some("z".into()),
                        },
                    );
            }
        }
        spec.with_latent(LatentSpec { level: 0, m: None })
    }
}

/// How latent scores are grouped into Metropolis-Hastings blocks.
///
/// Per-component blocking treats each eigencomponent's score vector
/// (one coordinate per group) as one block, the way samplers that realize
/// each component as a separate random-effect term behave. Per-group
/// blocking updates one group's whole score vector jointly instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBlocking {
    PerComponent,
    PerGroup,
}

fn default_score_blocking() -> ScoreBlocking {
    ScoreBlocking::PerGroup
}

/// Sampler budget and tuning constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Burn-in iterations discarded before retention starts.
    #[serde(default = "default_burnin")]
    pub burnin: usize,
    /// Retained draws per chain.
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Thinning interval between retained draws.
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    pub seed: u64,
    /// Slice-sampler bracket width on the log-variance scale.
    #[serde(default = "default_slice_width")]
    pub slice_width: f64,
    /// Maximum bracket expansions per side.
    #[serde(default = "default_slice_expand")]
    pub slice_max_expand: usize,
    #[serde(default = "default_score_blocking")]
    pub score_blocking: ScoreBlocking,
}

fn default_burnin() -> usize {
    1000
}
fn default_draws() -> usize {
    1000
}
fn default_thin() -> usize {
    5
}
fn default_chains() -> usize {
    1
}
fn default_slice_width() -> f64 {
    1.0
}
fn default_slice_expand() -> usize {
    10
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        SamplerConfig {
            burnin: default_burnin(),
            draws: default_draws(),
            thin: default_thin(),
            chains: default_chains(),
            seed,
            slice_width: default_slice_width(),
            slice_max_expand: default_slice_expand(),
            score_blocking: default_score_blocking(),
        }
    }
}

/// Backfitting caps and the variance-parameter search grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackfitConfig {
    #[serde(default = "default_cycles")]
    pub max_cycles: usize,
    /// Stop when the relative predictor change falls below this.
    #[serde(default = "default_bf_tol")]
    pub tol: f64,
}

fn default_cycles() -> usize {
    50
}
fn default_bf_tol() -> f64 {
    1e-4
}

impl Default for BackfitConfig {
    fn default() -> Self {
        BackfitConfig {
            max_cycles: default_cycles(),
            tol: default_bf_tol(),
        }
    }
}

impl BackfitConfig {
    /// Log-spaced variance-parameter candidates, 8 points per decade range.
    pub fn variance_grid() -> Vec<f64> {
        (0..8).map(|i| 10f64.powf(-4.0 + i as f64)).collect()
    }
}

/// Inverse-Gamma hyperprior parameters shared by all variance parameters.
pub const IG_SHAPE: f64 = 0.001;
pub const IG_RATE: f64 = 0.001;

/// Standard deviation of the vague normal prior on unpenalized
/// coefficients.
pub const VAGUE_SD: f64 = 1000.0;
