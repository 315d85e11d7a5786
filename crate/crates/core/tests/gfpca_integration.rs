//! End-to-end checks of the univariate GFPCA pipeline against simulation
//! ground truth.

use mfamm_core::evaluate::{reconstruct_latent_ls, CurveSet};
use mfamm_core::families::Family;
use mfamm_core::fitter::{BackfitConfig, SamplerConfig, TermSpec};
use mfamm_core::funcdata::{
    subsample_regime, Interval, MultivariateFunctionalDataset, SamplingRegime, ScalarObservation,
};
use mfamm_core::gfpca::{
    fit_univariate_gfpca, refit_scores, GfpcaConfig, UnivariateFpca,
};
use mfamm_core::mfpca::{assemble_levels, Weighting};
use mfamm_core::simulate::{simulate_dataset, SimulationConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

fn location_terms() -> Vec<TermSpec> {
    vec![
        TermSpec::FunctionalIntercept {
            d_t: 14,
            order_t: 2,
            cyclic: false,
        },
        TermSpec::LinearFunctional {
            covariate: "x".into(),
            d_t: 14,
            order_t: 2,
            cyclic: false,
        },
    ]
}

fn scale_terms() -> Vec<TermSpec> {
    vec![
        TermSpec::Constant { covariate: None },
        TermSpec::Constant {
            covariate: Some("z".into()),
        },
    ]
}

/// Gaussian curves built exactly from a known eigenfunction basis plus
/// noise: the global refit must recover the generating scores (correlation
/// above 0.9 per component at n = 150 on a dense grid).
#[test]
fn refit_scores_recover_known_expansion() {
    let n = 150;
    let grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // two smooth orthonormal components on the grid
    let phi = {
        let mut phi = DMatrix::zeros(grid.len(), 2);
        for (g, &t) in grid.iter().enumerate() {
            phi[(g, 0)] = (2.0 * std::f64::consts::PI * t).sin() * 2f64.sqrt();
            phi[(g, 1)] = (2.0 * std::f64::consts::PI * t).cos() * 2f64.sqrt();
        }
        phi
    };
    let nu: [f64; 2] = [1.0, 0.5];
    let mut xi = DMatrix::zeros(n, 2);
    let mut rows = Vec::new();
    for i in 0..n {
        for m in 0..2 {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            xi[(i, m)] = z * nu[m].sqrt();
        }
        for (g, &t) in grid.iter().enumerate() {
            let noise: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let latent = xi[(i, 0)] * phi[(g, 0)] + xi[(i, 1)] * phi[(g, 1)];
            rows.push(ScalarObservation {
                dim: 1,
                unit: (i + 1).to_string(),
                group: None,
                t,
                y: latent + 0.3 * noise,
            });
        }
    }
    let ds = MultivariateFunctionalDataset::new(
        1,
        Interval::new(0.0, 1.0),
        vec![Family::Gaussian],
        &rows,
    )
    .unwrap();
    let fpca = UnivariateFpca {
        level: 0,
        grid: grid.clone(),
        phi,
        upsilon: nu.to_vec(),
        pve_used: 1.0,
        scores: DMatrix::zeros(0, 0),
    };
    let mut sampler = SamplerConfig::with_seed(7);
    sampler.burnin = 300;
    sampler.draws = 300;
    sampler.thin = 2;
    let scores = refit_scores(
        &ds,
        None,
        &[TermSpec::FunctionalIntercept {
            d_t: 14,
            order_t: 2,
            cyclic: false,
        }],
        &[TermSpec::Constant { covariate: None }],
        &[fpca],
        &BackfitConfig::default(),
        &sampler,
    )
    .unwrap();
    for m in 0..2 {
        let est: Vec<f64> = (0..n).map(|i| scores[0][(i, m)]).collect();
        let truth: Vec<f64> = (0..n).map(|i| xi[(i, m)]).collect();
        let corr = correlation(&est, &truth);
        assert!(corr > 0.9, "component {m}: correlation {corr}");
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va.sqrt() * vb.sqrt())
}

/// A component with eigenvalue zero must come back with exactly zero
/// scores.
#[test]
fn zero_eigenvalue_components_get_zero_scores() {
    let grid: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = Vec::new();
    for i in 0..20 {
        for &t in &grid {
            let noise: f64 = rand_distr::StandardNormal.sample(&mut rng);
            rows.push(ScalarObservation {
                dim: 1,
                unit: (i + 1).to_string(),
                group: None,
                t,
                y: noise,
            });
        }
    }
    let ds = MultivariateFunctionalDataset::new(
        1,
        Interval::new(0.0, 1.0),
        vec![Family::Gaussian],
        &rows,
    )
    .unwrap();
    let mut phi = DMatrix::zeros(grid.len(), 2);
    for (g, &t) in grid.iter().enumerate() {
        phi[(g, 0)] = 1.0;
        phi[(g, 1)] = (2.0 * std::f64::consts::PI * t).sin() * 2f64.sqrt();
    }
    let fpca = UnivariateFpca {
        level: 0,
        grid: grid.clone(),
        phi,
        upsilon: vec![0.8, 0.0],
        pve_used: 1.0,
        scores: DMatrix::zeros(0, 0),
    };
    let mut sampler = SamplerConfig::with_seed(9);
    sampler.burnin = 50;
    sampler.draws = 50;
    sampler.thin = 1;
    let scores = refit_scores(
        &ds,
        None,
        &[TermSpec::Constant { covariate: None }],
        &[TermSpec::Constant { covariate: None }],
        &[fpca],
        &BackfitConfig::default(),
        &sampler,
    )
    .unwrap();
    for i in 0..20 {
        assert_ne!(scores[0][(i, 0)], 0.0);
        assert_eq!(scores[0][(i, 1)], 0.0);
    }
}

/// Sparse binary data: the global refit must undo the shrinkage of the
/// binned stage, so refit-score variance exceeds binned-score variance.
#[test]
fn refit_increases_score_variance_on_sparse_bernoulli() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (dense, truth) = simulate_dataset(&SimulationConfig { n: 150 }, &mut rng);
    let sparse = subsample_regime(&dense, SamplingRegime::Sparse, &mut rng).unwrap();
    let covs = truth.covariates();
    let view = sparse.dim_view(0);
    let mut config = GfpcaConfig::simulation_default(4100);
    config.refit_sampler.burnin = 300;
    config.refit_sampler.draws = 300;
    config.refit_sampler.thin = 2;
    let out = fit_univariate_gfpca(&view, Some(&covs), &location_terms(), &[], &config).unwrap();
    let fpca = &out.per_level[0];
    assert!(!fpca.upsilon.is_empty());
    let var_of = |m: &DMatrix<f64>| -> f64 {
        let mut total = 0.0;
        for c in 0..m.ncols() {
            let mean = m.column(c).sum() / m.nrows() as f64;
            total += m
                .column(c)
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (m.nrows() as f64 - 1.0);
        }
        total
    };
    let binned = var_of(&out.binned_scores[0]);
    let refit = var_of(&fpca.scores);
    assert!(
        refit > binned,
        "refit variance {refit} should exceed binned variance {binned}"
    );
}

/// Binary bins carry little information about the latent level: the local
/// model's random-intercept variance estimate stays below the true latent
/// variance (the documented attenuation of binned binary estimates).
#[test]
fn bernoulli_bin_variance_underestimates_truth() {
    use mfamm_core::gfpca::{bin_data, fit_local_mixed_model, BinSpec, LocalModelConfig, LocalModelData};
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (dense, truth) = simulate_dataset(&SimulationConfig { n: 200 }, &mut rng);
    let view = dense.dim_view(0);
    let bins = BinSpec::equidistant(11, 0.3, Interval::new(0.0, 1.0), false);
    let binned = bin_data(view.dim_observations(0), &bins);
    // center bin (t = 0.5)
    let bin_obs = &binned.bins[5];
    let y: Vec<f64> = bin_obs.iter().map(|o| o.y).collect();
    let unit_of_row: Vec<usize> = bin_obs.iter().map(|o| o.unit).collect();
    let mut x_fixed = DMatrix::zeros(y.len(), 2);
    for (r, &u) in unit_of_row.iter().enumerate() {
        x_fixed[(r, 0)] = 1.0;
        x_fixed[(r, 1)] = truth.x[u];
    }
    let data = LocalModelData {
        family: Family::Bernoulli,
        y: &y,
        x_fixed: &x_fixed,
        x_scale: None,
        unit_of_row: &unit_of_row,
        n_units: view.n_units(),
        group_of_unit: None,
        n_groups: 0,
    };
    let fit = fit_local_mixed_model(&data, &LocalModelConfig::default()).unwrap();
    // true latent variance near the bin center: variance across units of
    // the latent process averaged over the bin's span
    let grid = &truth.grid;
    let mut latent_var = 0.0;
    let mut count = 0;
    for (g, &t) in grid.iter().enumerate() {
        if (t - 0.5f64).abs() <= 0.3 {
            let col = truth.lambda[0].column(g);
            let mean = col.sum() / col.len() as f64;
            latent_var += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (col.len() as f64 - 1.0);
            count += 1;
        }
    }
    latent_var /= count as f64;
    assert!(
        fit.variances[0] < latent_var,
        "binned variance {} should underestimate the true latent variance {latent_var}",
        fit.variances[0]
    );
}

/// One replicate of the full eigenbasis-estimation pipeline on the
/// irregular regime: least-squares reconstruction of the true latent
/// processes in the estimated basis.
#[test]
fn estimated_basis_reconstructs_latent_processes() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (dense, truth) = simulate_dataset(&SimulationConfig { n: 150 }, &mut rng);
    let irregular = subsample_regime(&dense, SamplingRegime::Irregular, &mut rng).unwrap();
    let covs = truth.covariates();
    let mut uni = Vec::new();
    for dim in 0..3 {
        let view = irregular.dim_view(dim);
        let mut config = GfpcaConfig::simulation_default(6100 + dim as u64);
        config.refit_sampler.burnin = 500;
        config.refit_sampler.draws = 500;
        config.refit_sampler.thin = 2;
        let scale: Vec<TermSpec> = if dim == 2 { scale_terms() } else { Vec::new() };
        let out =
            fit_univariate_gfpca(&view, Some(&covs), &location_terms(), &scale, &config).unwrap();
        println!(
            "dim {dim}: M = {}, upsilon = {:?}, flagged = {:?}",
            out.per_level[0].phi.ncols(),
            out.per_level[0].upsilon,
            out.flagged_bins
        );
        // at pve = 0.99 the chosen truncation orders cluster in 2..6
        let m = out.per_level[0].phi.ncols();
        assert!((2..=6).contains(&m), "dim {dim}: M = {m}");
        uni.push(out.per_level.clone());
    }
    let bases = assemble_levels(&uni, Weighting::Equal).unwrap();
    assert_eq!(bases.len(), 1);
    let truth_sets: Vec<CurveSet> = (0..3)
        .map(|dim| CurveSet::new(truth.grid.clone(), truth.lambda[dim].clone()))
        .collect();
    let errs = reconstruct_latent_ls(&truth_sets, &bases[0]).unwrap();
    println!("reconstruction rrmse per dim: {errs:?}");
    for (dim, e) in errs.iter().enumerate() {
        assert!(*e < 0.3, "dim {dim} reconstruction rrmse {e}");
    }
}
