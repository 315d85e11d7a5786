//! Posterior sample storage, summaries, and convergence diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::fitter::design::DesignBlocks;
use crate::fitter::model::FitState;

/// Draws of one named parameter block: rows are retained draws (chains
/// stacked chain-major), columns the block coordinates.
#[derive(Debug, Clone)]
pub struct BlockDraws {
    pub name: String,
    pub draws: DMatrix<f64>,
}

/// Per-block MCMC draws with chain/draw indexing and sampler diagnostics.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub thin: usize,
    pub burnin: usize,
    pub seed: u64,
    pub coef: Vec<BlockDraws>,
    /// Variance parameters per coefficient block (zero columns when none).
    pub tau2: Vec<BlockDraws>,
    /// Scores per latent block, flattened group-major: column `g * m + j`.
    pub scores: Vec<BlockDraws>,
    /// Score variances per latent block.
    pub nu: Vec<BlockDraws>,
    /// Acceptance rates per Metropolis-Hastings block.
    pub acceptance: Vec<(String, f64)>,
    /// Number of ridge regularizations applied to indefinite proposals.
    pub ridge_events: u64,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.chains * self.draws_per_chain
    }

    pub fn coef_by_name(&self, name: &str) -> Option<&BlockDraws> {
        self.coef.iter().find(|b| b.name == name)
    }

    /// Posterior-mean parameters as a state (predictors recomputed).
    pub fn posterior_mean_state(&self, design: &DesignBlocks) -> FitState {
        let mut state = FitState::init(design);
        for (i, block) in self.coef.iter().enumerate() {
            state.coefs[i] = column_means(&block.draws);
        }
        for (i, block) in self.tau2.iter().enumerate() {
            let means = column_means(&block.draws);
            state.tau2[i] = means.iter().copied().collect();
        }
        for (u, block) in self.scores.iter().enumerate() {
            let means = column_means(&block.draws);
            let m = design.latent[u].m;
            for g in 0..design.latent[u].groups.len() {
                for j in 0..m {
                    state.scores[u][(g, j)] = means[g * m + j];
                }
            }
        }
        for (u, block) in self.nu.iter().enumerate() {
            let means = column_means(&block.draws);
            state.nu[u] = means.iter().copied().collect();
        }
        state.recompute_eta(design);
        state
    }

    /// View one chain's rows of a draws matrix.
    pub fn chain_rows<'a>(&self, draws: &'a DMatrix<f64>, chain: usize) -> nalgebra::DMatrixView<'a, f64> {
        draws.rows(chain * self.draws_per_chain, self.draws_per_chain)
    }
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |c, _| m.column(c).sum() / m.nrows() as f64)
}

/// Potential scale reduction factor (the classic between/within variance
/// ratio) of one scalar parameter across chains.
pub fn potential_scale_reduction(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|h| h.iter().sum::<f64>() / h.len() as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0)
        * means
            .iter()
            .map(|mu| (mu - grand) * (mu - grand))
            .sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(h, mu)| {
            h.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (h.len() as f64 - 1.0)
        })
        .sum::<f64>()
        / m;
    if w <= 1e-300 {
        return 1.0;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Largest PSRF across the columns of a block, per-chain layout as stored
/// in [`PosteriorSamples`].
pub fn block_max_rhat(samples: &PosteriorSamples, draws: &DMatrix<f64>) -> f64 {
    let mut worst = 1.0f64;
    for c in 0..draws.ncols() {
        let chains: Vec<Vec<f64>> = (0..samples.chains)
            .map(|ch| {
                (0..samples.draws_per_chain)
                    .map(|d| draws[(ch * samples.draws_per_chain + d, c)])
                    .collect()
            })
            .collect();
        worst = worst.max(potential_scale_reduction(&chains));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rhat_near_one_for_iid_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let r = potential_scale_reduction(&chains);
        assert!(r < 1.05, "rhat {r}");
    }

    #[test]
    fn rhat_large_for_separated_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chains: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                (0..500)
                    .map(|_| rng.gen_range(-0.1..0.1) + c as f64 * 5.0)
                    .collect()
            })
            .collect();
        assert!(potential_scale_reduction(&chains) > 2.0);
    }
}
