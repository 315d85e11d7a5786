//! Stage implementations. Every stage writes its artifacts into a
//! temporary directory first and renames them into place on success, so
//! failed stages leave no partial outputs behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mfamm_core::evaluate::{rrmse, CurveSet};
use mfamm_core::families::Family;
use mfamm_core::fitter::{
    backfit_init, build_design, coefficient_curve_draws, latent_curves_from_state, mcmc_sample,
    predictor_curves_from_state, BackfitConfig, SamplerConfig,
};
use mfamm_core::funcdata::{
    load_long_csv, subsample_regime, write_long_csv, ColumnSchema, CovariateTable, Interval,
};
use mfamm_core::gfpca::{BinSpec, GfpcaConfig, LocalEstimator, UnivariateFpca};
use mfamm_core::io as core_io;
use mfamm_core::mfpca::{assemble_levels, truncate};
use mfamm_core::simulate::{simulate_dataset, SimulationConfig};

use crate::config::{LocalEstimatorConfig, PipelineConfig, StageName};
use crate::manifest::Manifest;

/// Collects a stage's files in a temp directory and renames them into the
/// output directory only when the whole stage succeeded.
pub struct StageWriter {
    tmp: PathBuf,
    out: PathBuf,
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl StageWriter {
    pub fn new(out: &Path, stage: StageName) -> Result<Self> {
        let tmp = out.join(format!(".tmp-{stage}"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        Ok(StageWriter {
            tmp,
            out: out.to_path_buf(),
            files: Vec::new(),
            committed: false,
        })
    }

    /// Register an output and return the temporary path to write it to.
    pub fn stage_path(&mut self, name: &str) -> PathBuf {
        let tmp_path = self.tmp.join(name);
        self.files.push((tmp_path.clone(), self.out.join(name)));
        tmp_path
    }

    pub fn commit(mut self, manifest: &mut Manifest) -> Result<()> {
        for (tmp, fin) in &self.files {
            if fin.exists() {
                if fin.is_dir() {
                    std::fs::remove_dir_all(fin)?;
                } else {
                    std::fs::remove_file(fin)?;
                }
            }
            std::fs::rename(tmp, fin)
                .with_context(|| format!("renaming {} into place", fin.display()))?;
            if fin.is_file() {
                manifest.record_output(fin)?;
            }
        }
        std::fs::remove_dir_all(&self.tmp).ok();
        self.committed = true;
        Ok(())
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        if !self.committed {
            std::fs::remove_dir_all(&self.tmp).ok();
        }
    }
}

fn families_from_names(names: &[String]) -> Result<Vec<Family>> {
    names
        .iter()
        .map(|n| Family::from_name(n).map_err(|e| anyhow!(e)))
        .collect()
}

fn curve_rows_from_matrix(
    kind: &str,
    dim: usize,
    units: &[String],
    grid: &[f64],
    values: &DMatrix<f64>,
) -> Vec<(String, usize, String, f64, f64)> {
    let mut rows = Vec::with_capacity(units.len() * grid.len());
    for (u, unit) in units.iter().enumerate() {
        for (g, &t) in grid.iter().enumerate() {
            rows.push((kind.to_string(), dim + 1, unit.clone(), t, values[(u, g)]));
        }
    }
    rows
}

pub fn run_simulate(config: &PipelineConfig, manifest: &mut Manifest) -> Result<()> {
    let section = config
        .simulate
        .as_ref()
        .ok_or_else(|| anyhow!("simulate section missing"))?;
    let mut writer = StageWriter::new(&config.out, StageName::Simulate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (dense, truth) = simulate_dataset(&SimulationConfig { n: section.n }, &mut rng);

    write_long_csv(&dense, &writer.stage_path("dataset_dense.csv"))?;
    for (i, &regime) in section.regimes.iter().enumerate() {
        let mut sub_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0xBEEF + i as u64));
        let sub = subsample_regime(&dense, regime, &mut sub_rng)?;
        write_long_csv(
            &sub,
            &writer.stage_path(&format!("dataset_{}.csv", regime.name())),
        )?;
    }
    truth
        .covariates()
        .write_csv(&writer.stage_path("covariates.csv"))?;
    core_io::write_eigenbasis_set(
        std::slice::from_ref(&truth.eigenbasis),
        &writer.stage_path("truth_eigenbasis.csv"),
        &writer.stage_path("truth_eigenbasis.json"),
    )?;

    let units = dense.unit_ids().to_vec();
    let mut rows = Vec::new();
    for dim in 0..3 {
        rows.extend(curve_rows_from_matrix(
            "eta1",
            dim,
            &units,
            &truth.grid,
            &truth.eta1[dim],
        ));
        rows.extend(curve_rows_from_matrix(
            "lambda",
            dim,
            &units,
            &truth.grid,
            &truth.lambda[dim],
        ));
        let coef0 = format!("coef_{}", core_io::sanitize_name(&format!("k{}/r1/intercept(t)", dim + 1)));
        let coef1 = format!(
            "coef_{}",
            core_io::sanitize_name(&format!("k{}/r1/linear[x](t)", dim + 1))
        );
        for (g, &t) in truth.grid.iter().enumerate() {
            rows.push((coef0.clone(), dim + 1, String::new(), t, truth.beta0[g]));
            rows.push((coef1.clone(), dim + 1, String::new(), t, truth.beta1[g]));
        }
    }
    core_io::write_curves_csv(&writer.stage_path("truth_curves.csv"), &rows)?;

    let scalars = serde_json::json!({
        "gamma0": truth.gamma0,
        "gamma1": truth.gamma1,
        "eigenvalues": mfamm_core::simulate::sim_eigenvalues(),
    });
    std::fs::write(
        writer.stage_path("truth_scalars.json"),
        serde_json::to_string_pretty(&scalars)?,
    )?;
    writer.commit(manifest)
}

fn default_dataset_path(config: &PipelineConfig) -> PathBuf {
    let name = config
        .simulate
        .as_ref()
        .and_then(|s| s.regimes.first())
        .map(|r| format!("dataset_{}.csv", r.name()))
        .unwrap_or_else(|| "dataset_dense.csv".to_string());
    config.out.join(name)
}

fn resolve<'a>(explicit: &'a Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    explicit.clone().unwrap_or(fallback)
}

fn load_covariates(path: &Path, manifest: &mut Manifest) -> Result<Option<CovariateTable>> {
    if path.exists() {
        manifest.record_input(path)?;
        Ok(Some(CovariateTable::load_csv(path)?))
    } else {
        Ok(None)
    }
}

pub fn run_gfpca(config: &PipelineConfig, manifest: &mut Manifest) -> Result<()> {
    let section = config
        .gfpca
        .as_ref()
        .ok_or_else(|| anyhow!("gfpca section missing"))?;
    let mut writer = StageWriter::new(&config.out, StageName::Gfpca)?;
    let dataset_path = resolve(&section.dataset, default_dataset_path(config));
    manifest.record_input(&dataset_path)?;
    let families = families_from_names(&section.families)?;
    let domain = Interval::new(section.domain[0], section.domain[1]);
    let dataset = load_long_csv(&dataset_path, &ColumnSchema::default(), domain, &families)?;
    let covariates = load_covariates(
        &resolve(&section.covariates, config.out.join("covariates.csv")),
        manifest,
    )?;

    let bins = match (&section.bins.centers, section.bins.n) {
        (Some(centers), _) => BinSpec::with_centers(
            centers.clone(),
            section.bins.halfwidth,
            domain,
            section.bins.cyclic,
        ),
        (None, Some(n)) => {
            BinSpec::equidistant(n, section.bins.halfwidth, domain, section.bins.cyclic)
        }
        (None, None) => bail!("gfpca.bins needs `n` or `centers`"),
    };

    let outputs: Result<Vec<(usize, Vec<UnivariateFpca>)>> = (0..dataset.k())
        .into_par_iter()
        .map(|dim| {
            let view = dataset.dim_view(dim);
            let mut gf = GfpcaConfig {
                bins: bins.clone(),
                pve: section.pve,
                n_smooth_basis: section.n_smooth_basis,
                cyclic: section.bins.cyclic,
                local_estimator: match section.local_estimator {
                    LocalEstimatorConfig::Laplace => LocalEstimator::Laplace,
                    LocalEstimatorConfig::Mcmc => LocalEstimator::Mcmc,
                },
                refit_sampler: SamplerConfig::with_seed(
                    config.seed ^ (0x6F9C_A000 + dim as u64),
                ),
                backfit: BackfitConfig::default(),
            };
            gf.refit_sampler.burnin = section.refit.burnin;
            gf.refit_sampler.draws = section.refit.draws;
            gf.refit_sampler.thin = section.refit.thin;
            let scale_terms = section
                .scale_terms
                .get(&format!("{}", dim + 1))
                .cloned()
                .unwrap_or_default();
            let out = mfamm_core::gfpca::fit_univariate_gfpca(
                &view,
                covariates.as_ref(),
                &section.location_terms,
                &scale_terms,
                &gf,
            )
            .map_err(|e| anyhow!("dimension {}: {e}", dim + 1))?;
            Ok((dim, out.per_level))
        })
        .collect();
    let mut flat = Vec::new();
    for (dim, levels) in outputs? {
        for fpca in levels {
            flat.push((dim, fpca));
        }
    }
    core_io::write_ufpca_set(
        &flat,
        &writer.stage_path("gfpca_eigenfunctions.csv"),
        &writer.stage_path("gfpca_scores.csv"),
        &writer.stage_path("gfpca_meta.json"),
    )?;
    writer.commit(manifest)
}

pub fn run_mfpca(config: &PipelineConfig, manifest: &mut Manifest) -> Result<()> {
    let section = config
        .mfpca
        .as_ref()
        .ok_or_else(|| anyhow!("mfpca section missing"))?;
    let mut writer = StageWriter::new(&config.out, StageName::Mfpca)?;
    let csv = config.out.join("gfpca_eigenfunctions.csv");
    let scores = config.out.join("gfpca_scores.csv");
    let meta = config.out.join("gfpca_meta.json");
    for p in [&csv, &scores, &meta] {
        manifest.record_input(p)?;
    }
    let uni = core_io::read_ufpca_set(&csv, &scores, &meta)?;
    let mut bases = assemble_levels(&uni, section.weighting)?;
    if let Some(pve) = section.pve {
        bases = bases.iter().map(|b| truncate(b, pve)).collect();
    }
    core_io::write_eigenbasis_set(
        &bases,
        &writer.stage_path("eigenbasis.csv"),
        &writer.stage_path("eigenbasis.json"),
    )?;
    writer.commit(manifest)
}

pub fn run_fit(config: &PipelineConfig, manifest: &mut Manifest) -> Result<()> {
    let section = config
        .fit
        .as_ref()
        .ok_or_else(|| anyhow!("fit section missing"))?;
    let mut writer = StageWriter::new(&config.out, StageName::Fit)?;
    let dataset_path = resolve(&section.dataset, default_dataset_path(config));
    manifest.record_input(&dataset_path)?;
    let families: Vec<Family> = section.model.dims.iter().map(|d| d.family).collect();
    let dataset = load_long_csv(
        &dataset_path,
        &ColumnSchema::default(),
        section.model.domain,
        &families,
    )?;
    let covariates = load_covariates(
        &resolve(&section.covariates, config.out.join("covariates.csv")),
        manifest,
    )?;

    let bases = if section.model.latent.is_empty() {
        Vec::new()
    } else {
        let default_basis = if config.out.join("eigenbasis.csv").exists() {
            config.out.join("eigenbasis.csv")
        } else {
            config.out.join("truth_eigenbasis.csv")
        };
        let csv = resolve(&section.eigenbasis, default_basis);
        let json = csv.with_extension("json");
        manifest.record_input(&csv)?;
        manifest.record_input(&json)?;
        core_io::read_eigenbasis_set(&csv, &json)?
    };

    let design = build_design(&dataset, &section.model, &bases, covariates.as_ref())?;
    let init = backfit_init(&design, &BackfitConfig::default())?;
    let mut sampler = SamplerConfig::with_seed(config.seed ^ 0xF17_0000);
    sampler.burnin = section.sampler.burnin;
    sampler.draws = section.sampler.draws;
    sampler.thin = section.sampler.thin;
    sampler.chains = section.sampler.chains;
    let samples = mcmc_sample(&design, &init, &sampler)?;

    core_io::write_samples_dir(&samples, &writer.stage_path("samples"))?;

    // fitted curves on the reporting grid: posterior-mean eta and latent
    // parts per unit, plus coefficient functions of every spline block
    let state = samples.posterior_mean_state(&design);
    let grid = section.model.domain.grid(section.curve_grid);
    let mut rows = Vec::new();
    for (u, unit) in design.unit_ids.iter().enumerate() {
        let _ = u;
        let eta = predictor_curves_from_state(&design, &state, unit, covariates.as_ref(), &grid)?;
        let lambda = latent_curves_from_state(&design, &state, unit, &grid)?;
        for dim in 0..design.k() {
            for (g, &t) in grid.iter().enumerate() {
                rows.push(("eta1".to_string(), dim + 1, unit.clone(), t, eta[dim][0][g]));
                rows.push((
                    "lambda".to_string(),
                    dim + 1,
                    unit.clone(),
                    t,
                    lambda[dim][g],
                ));
            }
        }
    }
    for block in &design.coef {
        if matches!(
            block.realization,
            mfamm_core::fitter::design::TermRealization::Functional { .. }
        ) {
            let draws = coefficient_curve_draws(&design, &samples, &block.name, &grid)?;
            let kind = format!("coef_{}", core_io::sanitize_name(&block.name));
            for (g, &t) in grid.iter().enumerate() {
                let mean = draws.column(g).sum() / draws.nrows() as f64;
                rows.push((kind.clone(), block.dim + 1, String::new(), t, mean));
            }
        }
    }
    core_io::write_curves_csv(&writer.stage_path("fitted_curves.csv"), &rows)?;

    // normalized randomized quantile residuals at the posterior-mean
    // parameters, for external diagnostic plotting
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7E51_D0A1u64);
    let mut residuals = String::from("dim,unit,t,residual\n");
    for dim in 0..design.k() {
        let rows = &design.rows[dim];
        let family = rows.family;
        for r in 0..rows.len() {
            let eta = state.eta_pair(dim, r);
            let theta: Vec<f64> = family
                .links()
                .iter()
                .zip(eta.iter())
                .map(|(l, &e)| l.apply(e))
                .collect();
            let residual = mfamm_core::evaluate::randomized_quantile_residual(
                family,
                rows.y[r],
                &theta,
                &mut rng,
            );
            residuals.push_str(&format!(
                "{},{},{},{}\n",
                dim + 1,
                design.unit_ids[rows.unit[r]],
                rows.t[r],
                residual
            ));
        }
    }
    std::fs::write(writer.stage_path("residuals.csv"), residuals)?;
    writer.commit(manifest)
}

type CurveKey = (String, usize);

fn group_curves(
    rows: &[(String, usize, String, f64, f64)],
) -> BTreeMap<CurveKey, BTreeMap<String, Vec<(f64, f64)>>> {
    let mut out: BTreeMap<CurveKey, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for (kind, dim, unit, t, v) in rows {
        out.entry((kind.clone(), *dim))
            .or_default()
            .entry(unit.clone())
            .or_default()
            .push((*t, *v));
    }
    out
}

pub fn run_evaluate(config: &PipelineConfig, manifest: &mut Manifest) -> Result<()> {
    let section = config
        .evaluate
        .as_ref()
        .ok_or_else(|| anyhow!("evaluate section missing"))?;
    let mut writer = StageWriter::new(&config.out, StageName::Evaluate)?;
    let truth_path = resolve(&section.truth, config.out.join("truth_curves.csv"));
    let est_path = resolve(&section.estimate, config.out.join("fitted_curves.csv"));
    manifest.record_input(&truth_path)?;
    manifest.record_input(&est_path)?;
    let truth = group_curves(&core_io::read_curves_csv(&truth_path)?);
    let est = group_curves(&core_io::read_curves_csv(&est_path)?);

    let scenario = config
        .simulate
        .as_ref()
        .and_then(|s| s.regimes.first())
        .map(|r| r.name().to_string())
        .unwrap_or_else(|| "custom".to_string());
    let mut out = String::from("scenario,component,dim,rrmse\n");
    for (key, truth_units) in &truth {
        let Some(est_units) = est.get(key) else {
            continue;
        };
        // shared units with shared, sorted grids
        let units: Vec<&String> = truth_units
            .keys()
            .filter(|u| est_units.contains_key(*u))
            .collect();
        if units.is_empty() {
            continue;
        }
        let mut grid: Vec<f64> = truth_units[units[0]].iter().map(|&(t, _)| t).collect();
        grid.sort_by(f64::total_cmp);
        let collect = |series: &BTreeMap<String, Vec<(f64, f64)>>| -> DMatrix<f64> {
            let mut m = DMatrix::zeros(units.len(), grid.len());
            for (r, unit) in units.iter().enumerate() {
                let mut pts = series[*unit].clone();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                for (g, &(_, v)) in pts.iter().enumerate() {
                    m[(r, g)] = v;
                }
            }
            m
        };
        let value = rrmse(
            &CurveSet::new(grid.clone(), collect(truth_units)),
            &CurveSet::new(grid.clone(), collect(est_units)),
        )
        .map_err(|e| anyhow!("component {} dim {}: {e}", key.0, key.1))?;
        out.push_str(&format!("{scenario},{},{},{}\n", key.0, key.1, value));
    }
    std::fs::write(writer.stage_path("metrics.csv"), out)?;
    writer.commit(manifest)
}

pub fn run_stage(
    stage: StageName,
    config: &PipelineConfig,
    manifest: &mut Manifest,
) -> Result<()> {
    match stage {
        StageName::Simulate => run_simulate(config, manifest),
        StageName::Gfpca => run_gfpca(config, manifest),
        StageName::Mfpca => run_mfpca(config, manifest),
        StageName::Fit => run_fit(config, manifest),
        StageName::Evaluate => run_evaluate(config, manifest),
    }
}
