//! Integration checks of the sampler machinery on models with analytic
//! posteriors, plus determinism and smoke coverage of the full fit path.

use mfamm_core::families::Family;
use mfamm_core::fitter::{
    backfit_init, build_design, fit_model, mcmc_sample, BackfitConfig, ModelSpec, SamplerConfig,
    TermSpec,
};
use mfamm_core::funcdata::{
    subsample_regime, CovariateTable, Interval, MultivariateFunctionalDataset, SamplingRegime,
    ScalarObservation,
};
use mfamm_core::simulate::{simulate_dataset, SimulationConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

fn gaussian_functional_dataset(
    n_units: usize,
    seed: u64,
) -> (MultivariateFunctionalDataset, CovariateTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut cov = CovariateTable::new(vec!["x".into()]);
    for unit in 1..=n_units {
        let x = rng.gen_range(-1.0..1.0);
        cov.insert(&unit.to_string(), vec![x]);
        for i in 0..12 {
            let t = i as f64 / 11.0;
            let noise: f64 = rand_distr::StandardNormal.sample(&mut rng);
            rows.push(ScalarObservation {
                dim: 1,
                unit: unit.to_string(),
                group: None,
                t,
                y: (2.0 * std::f64::consts::PI * t).sin() + 0.5 * x + noise,
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
    (ds, cov)
}

/// Conjugate Gaussian sub-model (sd fixed at 1, vague prior): the sampler
/// must reproduce the analytic posterior moments within 3 Monte-Carlo
/// standard errors, and the Taylor proposal is exact so acceptance is ~1.
#[test]
fn mh_recovers_analytic_posterior_on_conjugate_gaussian() {
    let (ds, cov) = gaussian_functional_dataset(25, 7);
    let spec = ModelSpec::new(Interval::new(0.0, 1.0), &[Family::Gaussian])
        .with_term(0, 0, TermSpec::Constant { covariate: None })
        .with_term(
            0,
            0,
            TermSpec::Constant {
                covariate: Some("x".into()),
            },
        );
    let design = build_design(&ds, &spec, &[], Some(&cov)).unwrap();
    let init = backfit_init(&design, &BackfitConfig::default()).unwrap();
    let mut config = SamplerConfig::with_seed(11);
    config.burnin = 200;
    config.draws = 4000;
    config.thin = 1;
    let samples = mcmc_sample(&design, &init, &config).unwrap();

    // analytic posterior: N((X'X + I/sd^2)^{-1} X'y, (X'X + I/sd^2)^{-1})
    let n = design.rows[0].len();
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    for r in 0..n {
        x[(r, 0)] = design.coef[0].x[(r, 0)];
        x[(r, 1)] = design.coef[1].x[(r, 0)];
        y[r] = design.rows[0].y[r];
    }
    let prec = x.transpose() * &x + DMatrix::identity(2, 2) / (1000.0f64 * 1000.0);
    let cov_post = prec.try_inverse().unwrap();
    let mean_post = &cov_post * (x.transpose() * &y);

    for (block, coord) in [(0usize, 0usize), (1, 0)] {
        let draws = &samples.coef[block].draws;
        let vals: Vec<f64> = (0..draws.nrows()).map(|r| draws[(r, coord)]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (vals.len() as f64 - 1.0);
        let target_mean = mean_post[block];
        let target_var = cov_post[(block, block)];
        let mcse_mean = (target_var / vals.len() as f64).sqrt();
        assert!(
            (m - target_mean).abs() < 3.0 * mcse_mean,
            "block {block}: mean {m} vs {target_mean} (mcse {mcse_mean})"
        );
        let mcse_var = target_var * (2.0 / (vals.len() as f64 - 1.0)).sqrt();
        assert!(
            (v - target_var).abs() < 3.0 * mcse_var,
            "block {block}: var {v} vs {target_var}"
        );
    }
    for (name, rate) in &samples.acceptance {
        if name.starts_with('k') {
            assert!(*rate > 0.995, "{name} acceptance {rate}");
        }
    }
}

/// Gibbs variance update against the analytic inverse-Gamma full
/// conditional: Kolmogorov-Smirnov statistic below 0.02 at 10^4 draws.
#[test]
fn gibbs_variance_update_matches_analytic_inverse_gamma() {
    use statrs::function::gamma::gamma_ur;
    let (ds, cov) = gaussian_functional_dataset(12, 3);
    let spec = ModelSpec::new(Interval::new(0.0, 1.0), &[Family::Gaussian]).with_term(
        0,
        0,
        TermSpec::FunctionalIntercept {
            d_t: 10,
            order_t: 2,
            cyclic: false,
        },
    );
    let design = build_design(&ds, &spec, &[], Some(&cov)).unwrap();
    let mut state = mfamm_core::fitter::FitState::init(&design);
    // fixed coefficients beta
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in state.coefs[0].iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    state.recompute_eta(&design);

    let (penalty, rank) = match &design.coef[0].prior {
        mfamm_core::fitter::BlockPrior::Single { penalty, rank, .. } => (penalty.clone(), *rank),
        _ => panic!("expected a single-penalty block"),
    };
    let quad = (state.coefs[0].transpose() * &penalty * &state.coefs[0])[(0, 0)];
    let shape = 0.001 + 0.5 * rank as f64;
    let rate = 0.001 + 0.5 * quad;

    let config = SamplerConfig::with_seed(17);
    let n_draws = 10_000;
    let mut draws = Vec::with_capacity(n_draws);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..n_draws {
        mfamm_core::fitter::mcmc::update_variances(&design, &mut state, &config, &mut rng);
        draws.push(state.tau2[0][0]);
    }
    draws.sort_by(f64::total_cmp);
    // KS against IG(shape, rate): CDF(v) = Q(shape, rate / v)
    let mut ks = 0.0f64;
    for (i, &v) in draws.iter().enumerate() {
        let cdf = gamma_ur(shape, rate / v);
        let emp_hi = (i + 1) as f64 / n_draws as f64;
        let emp_lo = i as f64 / n_draws as f64;
        ks = ks.max((cdf - emp_hi).abs()).max((cdf - emp_lo).abs());
    }
    assert!(ks < 0.02, "KS statistic {ks}");
}

/// Identical seeds must give bit-identical draws, independent of chain
/// scheduling; distinct seeds must differ.
#[test]
fn sampler_is_deterministic_given_seed() {
    let (ds, cov) = gaussian_functional_dataset(10, 9);
    let spec = ModelSpec::new(Interval::new(0.0, 1.0), &[Family::Gaussian])
        .with_term(
            0,
            0,
            TermSpec::FunctionalIntercept {
                d_t: 8,
                order_t: 2,
                cyclic: false,
            },
        )
        .with_term(
            0,
            0,
            TermSpec::Constant {
                covariate: Some("x".into()),
            },
        );
    let design = build_design(&ds, &spec, &[], Some(&cov)).unwrap();
    let init = backfit_init(&design, &BackfitConfig::default()).unwrap();
    let mut config = SamplerConfig::with_seed(99);
    config.burnin = 50;
    config.draws = 100;
    config.thin = 1;
    config.chains = 2;
    let a = mcmc_sample(&design, &init, &config).unwrap();
    let b = mcmc_sample(&design, &init, &config).unwrap();
    for (x, y) in a.coef.iter().zip(&b.coef) {
        assert_eq!(x.draws, y.draws);
    }
    config.seed = 100;
    let c = mcmc_sample(&design, &init, &config).unwrap();
    assert_ne!(a.coef[0].draws, c.coef[0].draws);
}

/// Row permutations of the input CSV must not change posterior summaries.
#[test]
fn posterior_is_invariant_to_row_permutation() {
    let (ds, cov) = gaussian_functional_dataset(8, 21);
    let mut rows = ds.to_rows();
    rows.reverse();
    let permuted = MultivariateFunctionalDataset::new(
        1,
        Interval::new(0.0, 1.0),
        vec![Family::Gaussian],
        &rows,
    )
    .unwrap();
    let spec = ModelSpec::new(Interval::new(0.0, 1.0), &[Family::Gaussian]).with_term(
        0,
        0,
        TermSpec::FunctionalIntercept {
            d_t: 8,
            order_t: 2,
            cyclic: false,
        },
    );
    let mut config = SamplerConfig::with_seed(5);
    config.burnin = 50;
    config.draws = 50;
    config.thin = 1;
    let a = fit_model(&ds, &spec, &[], Some(&cov), &BackfitConfig::default(), &config).unwrap();
    let b = fit_model(
        &permuted,
        &spec,
        &[],
        Some(&cov),
        &BackfitConfig::default(),
        &config,
    )
    .unwrap();
    assert_eq!(a.samples.coef[0].draws, b.samples.coef[0].draws);
}

/// Prediction identities: a constant-only Gaussian model predicts the
/// posterior mean of its intercept everywhere, and log-link predictions
/// average after the transformation (Jensen ordering).
#[test]
fn predict_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut rows = Vec::new();
    for unit in 1..=15 {
        for i in 0..4 {
            let y: f64 = rand_distr::Poisson::new(3.0).unwrap().sample(&mut rng);
            rows.push(ScalarObservation {
                dim: 1,
                unit: unit.to_string(),
                group: None,
                t: i as f64 / 3.0,
                y,
            });
        }
    }
    let ds = MultivariateFunctionalDataset::new(
        1,
        Interval::new(0.0, 1.0),
        vec![Family::Poisson],
        &rows,
    )
    .unwrap();
    let spec = ModelSpec::new(ds.domain(), &[Family::Poisson])
        .with_term(0, 0, TermSpec::Constant { covariate: None });
    let design = build_design(&ds, &spec, &[], None).unwrap();
    let init = backfit_init(&design, &BackfitConfig::default()).unwrap();
    let mut config = SamplerConfig::with_seed(71);
    config.burnin = 100;
    config.draws = 300;
    config.thin = 1;
    let samples = mcmc_sample(&design, &init, &config).unwrap();
    let times = vec![0.0, 0.5, 1.0];
    let predicted = mfamm_core::fitter::predict_theta(
        &design,
        &samples,
        &["1".to_string()],
        None,
        &times,
        &[0.025, 0.5, 0.975],
    )
    .unwrap();
    let curve = &predicted[0];
    // log link: theta mean is mean(exp eta), averaged after transformation
    let draws = &samples.coef[0].draws;
    let mean_exp: f64 = draws.column(0).iter().map(|e| e.exp()).sum::<f64>() / draws.nrows() as f64;
    let exp_mean: f64 = (draws.column(0).sum() / draws.nrows() as f64).exp();
    for g in 0..times.len() {
        approx::assert_relative_eq!(curve.mean[g], mean_exp, epsilon = 1e-12);
        // quantiles monotone
        assert!(curve.quantiles[0].1[g] <= curve.quantiles[1].1[g]);
        assert!(curve.quantiles[1].1[g] <= curve.quantiles[2].1[g]);
    }
    assert!(mean_exp >= exp_mean, "Jensen ordering must hold");

    // unknown unit is a prediction error
    assert!(mfamm_core::fitter::predict_theta(
        &design,
        &samples,
        &["nope".to_string()],
        None,
        &times,
        &[0.5],
    )
    .is_err());
}

/// End-to-end smoke run of one reference sparse replicate: backfit
/// initialization already brings the predictor rrMSE below 1 and the
/// sampler returns finite draws with reasonable acceptance.
#[test]
fn small_simulation_fit_is_sane() {
    let n = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (dense, truth) = simulate_dataset(&SimulationConfig { n }, &mut rng);
    let sparse = subsample_regime(&dense, SamplingRegime::Sparse, &mut rng).unwrap();
    let spec = ModelSpec::simulation(sparse.families());
    let design = build_design(
        &sparse,
        &spec,
        &[truth.eigenbasis.clone()],
        Some(&truth.covariates()),
    )
    .unwrap();
    let init = backfit_init(&design, &BackfitConfig::default()).unwrap();

    // initialized eta rrMSE below 1.0 on all dimensions before sampling
    let grid = &truth.grid;
    for dim in 0..3 {
        let mut est = DMatrix::zeros(n, grid.len());
        for (u, unit) in design.unit_ids.iter().enumerate() {
            let eta = mfamm_core::fitter::predictor_curves_from_state(
                &design,
                &init,
                unit,
                Some(&truth.covariates()),
                grid,
            )
            .unwrap();
            for g in 0..grid.len() {
                est[(u, g)] = eta[dim][0][g];
            }
        }
        let rrmse = mfamm_core::evaluate::rrmse(
            &mfamm_core::evaluate::CurveSet::new(grid.clone(), truth.eta1[dim].clone()),
            &mfamm_core::evaluate::CurveSet::new(grid.clone(), est),
        )
        .unwrap();
        assert!(rrmse < 1.0, "dim {dim} backfit rrmse {rrmse}");
    }

    let mut config = SamplerConfig::with_seed(77);
    config.burnin = 200;
    config.draws = 100;
    config.thin = 2;
    let samples = mcmc_sample(&design, &init, &config).unwrap();
    for block in &samples.coef {
        assert!(block.draws.iter().all(|v| v.is_finite()));
    }
    for (name, rate) in &samples.acceptance {
        assert!(*rate > 0.2, "{name} acceptance {rate}");
    }
}
