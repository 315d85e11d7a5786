//! Pipeline configuration: one JSON file drives every stage. The schema
//! shipped under `schemas/pipeline.schema.json` documents the format;
//! parsing is strict (unknown fields are rejected).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mfamm_core::fitter::ModelSpec;
use mfamm_core::funcdata::SamplingRegime;
use mfamm_core::mfpca::Weighting;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Simulate,
    Gfpca,
    Mfpca,
    Fit,
    Evaluate,
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            StageName::Simulate => "simulate",
            StageName::Gfpca => "gfpca",
            StageName::Mfpca => "mfpca",
            StageName::Fit => "fit",
            StageName::Evaluate => "evaluate",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    /// Sampling regimes to emit alongside the dense dataset.
    #[serde(default)]
    pub regimes: Vec<SamplingRegime>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinsConfig {
    /// Equidistant center count (ignored when `centers` is given).
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub centers: Option<Vec<f64>>,
    pub halfwidth: f64,
    #[serde(default)]
    pub cyclic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalEstimatorConfig {
    Laplace,
    Mcmc,
}

impl Default for LocalEstimatorConfig {
    fn default() -> Self {
        LocalEstimatorConfig::Laplace
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBudget {
    #[serde(default = "default_burnin")]
    pub burnin: usize,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
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

impl Default for SamplerBudget {
    fn default() -> Self {
        SamplerBudget {
            burnin: default_burnin(),
            draws: default_draws(),
            thin: default_thin(),
            chains: default_chains(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfpcaStageConfig {
    /// Input dataset; defaults to the simulate stage's first regime output.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub covariates: Option<PathBuf>,
    pub domain: [f64; 2],
    pub families: Vec<String>,
    pub bins: BinsConfig,
    #[serde(default = "default_pve")]
    pub pve: f64,
    pub n_smooth_basis: usize,
    #[serde(default)]
    pub local_estimator: LocalEstimatorConfig,
    pub location_terms: Vec<mfamm_core::fitter::TermSpec>,
    /// Scale-predictor terms per dimension (1-based key).
    #[serde(default)]
    pub scale_terms: BTreeMap<String, Vec<mfamm_core::fitter::TermSpec>>,
    #[serde(default)]
    pub refit: SamplerBudget,
}

fn default_pve() -> f64 {
    0.99
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfpcaStageConfig {
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    /// Optional truncation by proportion of variance explained, applied per
    /// latent process.
    #[serde(default)]
    pub pve: Option<f64>,
}

fn default_weighting() -> Weighting {
    Weighting::Equal
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitStageConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub covariates: Option<PathBuf>,
    /// Eigenbasis CSV path (JSON sidecar expected next to it); defaults to
    /// the mfpca stage output, or the simulated truth basis if no mfpca
    /// stage ran.
    #[serde(default)]
    pub eigenbasis: Option<PathBuf>,
    pub model: ModelSpec,
    #[serde(default)]
    pub sampler: SamplerBudget,
    /// Grid length for the emitted fitted curves.
    #[serde(default = "default_grid_len")]
    pub curve_grid: usize,
}

fn default_grid_len() -> usize {
    101
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateStageConfig {
    /// Truth curve table; defaults to the simulate stage output.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    /// Estimate curve table; defaults to the fit stage output.
    #[serde(default)]
    pub estimate: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    pub stages: Vec<StageName>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub gfpca: Option<GfpcaStageConfig>,
    #[serde(default)]
    pub mfpca: Option<MfpcaStageConfig>,
    #[serde(default)]
    pub fit: Option<FitStageConfig>,
    #[serde(default)]
    pub evaluate: Option<EvaluateStageConfig>,
}

#[derive(Debug)]
pub struct SchemaError(pub String);

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SchemaError {}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SchemaError(format!("{}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| SchemaError(format!("{}: {e}", path.display())))?;
        config.validate(path)?;
        Ok(config)
    }

    /// Structural checks beyond deserialization: stage sections present,
    /// stage list a valid dependency chain.
    pub fn validate(&self, path: &Path) -> Result<(), SchemaError> {
        let err = |field: &str, msg: &str| {
            Err(SchemaError(format!(
                "{}: at `{field}`: {msg}",
                path.display()
            )))
        };
        if self.stages.is_empty() {
            return err("stages", "at least one stage is required");
        }
        let mut seen = Vec::new();
        for stage in &self.stages {
            if seen.contains(stage) {
                return err("stages", "stages may appear once each");
            }
            match stage {
                StageName::Simulate => {
                    if self.simulate.is_none() {
                        return err("simulate", "stage listed but section missing");
                    }
                }
                StageName::Gfpca => {
                    let section = match &self.gfpca {
                        None => return err("gfpca", "stage listed but section missing"),
                        Some(s) => s,
                    };
                    if section.dataset.is_none() && !seen.contains(&StageName::Simulate) {
                        return err(
                            "gfpca.dataset",
                            "no dataset path and no earlier simulate stage",
                        );
                    }
                    if section.bins.n.is_none() && section.bins.centers.is_none() {
                        return err("gfpca.bins", "either `n` or `centers` is required");
                    }
                    if !(section.pve > 0.0 && section.pve <= 1.0) {
                        return err("gfpca.pve", "must lie in (0, 1]");
                    }
                    for name in &section.families {
                        mfamm_core::families::Family::from_name(name)
                            .map_err(|e| SchemaError(format!(
                                "{}: at `gfpca.families`: {e}",
                                path.display()
                            )))?;
                    }
                }
                StageName::Mfpca => {
                    if self.mfpca.is_none() {
                        return err("mfpca", "stage listed but section missing");
                    }
                    if !seen.contains(&StageName::Gfpca) {
                        return err("stages", "mfpca requires a gfpca stage before it");
                    }
                    if let Some(pve) = self.mfpca.as_ref().unwrap().pve {
                        if !(pve > 0.0 && pve <= 1.0) {
                            return err("mfpca.pve", "must lie in (0, 1]");
                        }
                    }
                }
                StageName::Fit => {
                    let section = match &self.fit {
                        None => return err("fit", "stage listed but section missing"),
                        Some(s) => s,
                    };
                    if section.dataset.is_none() && !seen.contains(&StageName::Simulate) {
                        return err("fit.dataset", "no dataset path and no earlier simulate stage");
                    }
                    if !section.model.latent.is_empty()
                        && section.eigenbasis.is_none()
                        && !seen.contains(&StageName::Mfpca)
                        && !seen.contains(&StageName::Simulate)
                    {
                        return err(
                            "fit.eigenbasis",
                            "latent terms need an eigenbasis path or an earlier mfpca/simulate stage",
                        );
                    }
                }
                StageName::Evaluate => {
                    let section = match &self.evaluate {
                        None => return err("evaluate", "stage listed but section missing"),
                        Some(s) => s,
                    };
                    if section.truth.is_none() && !seen.contains(&StageName::Simulate) {
                        return err("evaluate.truth", "no truth path and no earlier simulate stage");
                    }
                    if section.estimate.is_none() && !seen.contains(&StageName::Fit) {
                        return err(
                            "evaluate.estimate",
                            "no estimate path and no earlier fit stage",
                        );
                    }
                }
            }
            seen.push(*stage);
        }
        Ok(())
    }
}
