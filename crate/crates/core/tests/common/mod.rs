//! Shared test fixtures: a small two-level application-format generator
//! (nested site/site-year design, negative binomial and Gamma outcomes on
//! a cyclic daily domain).

use mfamm_core::families::Family;
use mfamm_core::funcdata::{CovariateTable, Interval, MultivariateFunctionalDataset, ScalarObservation};
use rand::Rng;
use rand_distr::Distribution;

pub struct AppDemo {
    pub dataset: MultivariateFunctionalDataset,
    pub covariates: CovariateTable,
    #[allow(dead_code)]
    pub n_sites: usize,
    #[allow(dead_code)]
    pub n_years: usize,
}

/// Two NB count dimensions and two Gamma speed-like dimensions over a
/// cyclic day, with site-level and site-year-level latent processes and a
/// linear year drift.
pub fn generate_app_demo<R: Rng>(n_sites: usize, n_years: usize, rng: &mut R) -> AppDemo {
    let domain = Interval::new(0.0, 24.0);
    let times: Vec<f64> = (0..24).map(|h| h as f64).collect();
    let families = vec![
        Family::NegBinomial,
        Family::NegBinomial,
        Family::Gamma,
        Family::Gamma,
    ];
    let two_pi = 2.0 * std::f64::consts::PI;
    let f1 = |t: f64| (two_pi * t / 24.0).cos();
    let f2 = |t: f64| (two_pi * t / 24.0).sin();
    // daily baseline patterns on the log scale
    let baseline = |k: usize, t: f64| -> f64 {
        match k {
            0 => 3.4 + 1.1 * (two_pi * (t - 7.0) / 24.0).cos(),
            1 => 1.8 + 0.9 * (two_pi * (t - 6.0) / 24.0).cos(),
            2 => 3.7 - 0.15 * (two_pi * (t - 8.0) / 24.0).cos(),
            _ => 3.5 - 0.10 * (two_pi * (t - 8.0) / 24.0).cos(),
        }
    };
    // per-dimension loadings of the shared latent directions
    let load_site = [0.35, 0.40, 0.10, 0.12];
    let load_year = [0.20, 0.25, 0.06, 0.08];
    let year_drift = [-0.04, 0.03, 0.01, 0.02];
    let nb_size = 8.0;
    let gamma_shape = 25.0;

    let mut rows = Vec::new();
    let mut covariates = CovariateTable::new(vec!["year".into()]);
    for site in 1..=n_sites {
        let a_site: f64 = rand_distr::StandardNormal.sample(rng);
        let b_site: f64 = rand_distr::StandardNormal.sample(rng);
        for year in 0..n_years {
            let unit = format!("s{site}y{year}");
            covariates.insert(&unit, vec![year as f64]);
            let a_yr: f64 = rand_distr::StandardNormal.sample(rng);
            let b_yr: f64 = rand_distr::StandardNormal.sample(rng);
            for (k, family) in families.iter().enumerate() {
                for &t in &times {
                    let latent = load_site[k] * (a_site * f1(t) + b_site * f2(t))
                        + load_year[k] * (a_yr * f2(t) + b_yr * f1(t));
                    let eta = baseline(k, t) + year_drift[k] * year as f64 + latent;
                    let mean = eta.exp();
                    let y = match family {
                        Family::NegBinomial => {
                            // Gamma-Poisson mixture
                            let lambda: f64 = rand_distr::Gamma::new(nb_size, mean / nb_size)
                                .unwrap()
                                .sample(rng);
                            rand_distr::Poisson::new(lambda.max(1e-9)).unwrap().sample(rng)
                        }
                        Family::Gamma => rand_distr::Gamma::new(gamma_shape, mean / gamma_shape)
                            .unwrap()
                            .sample(rng)
                            .max(1e-6),
                        _ => unreachable!(),
                    };
                    rows.push(ScalarObservation {
                        dim: k + 1,
                        unit: unit.clone(),
                        group: Some(format!("s{site}")),
                        t,
                        y,
                    });
                }
            }
        }
    }
    let dataset = MultivariateFunctionalDataset::new(4, domain, families, &rows)
        .expect("generated demo data is valid");
    AppDemo {
        dataset,
        covariates,
        n_sites,
        n_years,
    }
}
