//! MCMC over coefficients: adaptive random-walk Metropolis under a Gaussian
//! prior, and Metropolis-within-Gibbs under the hierarchical Laplace
//! (Bayesian lasso) prior, where each coefficient's latent variance is
//! refreshed from its exact inverse-Gaussian conditional (Park-Casella)
//! between beta updates. Composition sampling stacks chains across path
//! imputations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctcrw::{draw_path, CtcrwError, CtcrwParams};
use crate::design::{build_design_with, CovariateSpec, DesignData, DesignError, DesignOptions};
use crate::discretize::{discretize, DiscretizeError};
use crate::grid::RasterGrid;
use crate::seeds::child_seed;
use crate::spline::SplineConfig;
use crate::track::Track;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("posterior is not finite at the initial point")]
    NonFiniteInit,
    #[error("no proposals were accepted after adaptation ({n_kept} post-burn iterations, scale {scale})")]
    ZeroAcceptance { n_kept: usize, scale: f64 },
    #[error("invalid prior: {0}")]
    BadPrior(String),
    #[error("n_burn ({n_burn}) must be < n_iter ({n_iter})")]
    BadIterations { n_iter: usize, n_burn: usize },
    #[error(transparent)]
    Ctcrw(#[from] CtcrwError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Prior on the coefficient vector.
#[derive(Debug, Clone)]
pub enum Prior {
    /// Independent zero-mean Gaussians with the given variances (one per
    /// column, recycled if a single value is given).
    Gaussian { variances: Vec<f64> },
    /// Hierarchical Laplace prior with rate `gamma` on penalized columns
    /// (marginally Laplace(0, 1/gamma)); unpenalized columns get a diffuse
    /// Gaussian.
    Laplace { gamma: f64 },
}

impl Prior {
    /// Diagonal Gaussian with one shared variance.
    pub fn gaussian(variance: f64) -> Self {
        Prior::Gaussian {
            variances: vec![variance],
        }
    }
}

/// Variance given to unpenalized columns under the Laplace prior.
const DIFFUSE_VAR: f64 = 1e6;

/// Posterior draws of the coefficients.
#[derive(Debug, Clone)]
pub struct McmcChain {
    /// Post-burn-in draws, iterations x coefficients.
    pub draws: DMatrix<f64>,
    /// Latent prior variances per iteration (Laplace prior only).
    pub sigma2_draws: Option<DMatrix<f64>>,
    /// Post-adaptation acceptance rate per sampled block (one entry per
    /// chain segment).
    pub acceptance_rate: Vec<f64>,
    pub seed: u64,
    pub col_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub rows: Vec<ChainRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Equal-tailed 95% interval.
    pub lower: f64,
    pub upper: f64,
    pub starred: bool,
}

impl McmcChain {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.column(j).iter().copied().collect()
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.draws.column(j).sum() / self.n_draws() as f64
    }

    pub fn summary(&self) -> ChainSummary {
        let n = self.n_draws();
        let rows = (0..self.draws.ncols())
            .map(|j| {
                let mut xs = self.column(j);
                let mean = xs.iter().sum::<f64>() / n as f64;
                let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                    / (n as f64 - 1.0))
                    .sqrt();
                xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let q = |p: f64| -> f64 {
                    let idx = (p * (n as f64 - 1.0)).round() as usize;
                    xs[idx.min(n - 1)]
                };
                let (lower, upper) = (q(0.025), q(0.975));
                ChainRow {
                    name: self.col_names[j].clone(),
                    mean,
                    sd,
                    lower,
                    upper,
                    starred: lower > 0.0 || upper < 0.0,
                }
            })
            .collect();
        ChainSummary { rows }
    }

    /// Writes `iter,<coef names...>` CSV.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "iter")?;
        for name in &self.col_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for i in 0..self.n_draws() {
            write!(w, "{i}")?;
            for j in 0..self.draws.ncols() {
                write!(w, ",{}", self.draws[(i, j)])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Monte-Carlo standard error of the mean of a (correlated) chain by the
/// batch-means method.
pub fn batch_means_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    let n_batches = (n as f64).sqrt().floor() as usize;
    if n_batches < 2 {
        return f64::INFINITY;
    }
    let len = n / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| xs[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n_batches as f64 - 1.0);
    (var / n_batches as f64).sqrt()
}

const MAX_ETA: f64 = 700.0;
const TARGET_ACCEPTANCE: f64 = 0.234;

fn loglik(design: &DesignData, beta: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for i in 0..design.n_rows() {
        let eta = design.offset[i] + design.x.row(i).transpose().dot(beta);
        if eta > MAX_ETA {
            return f64::NEG_INFINITY;
        }
        ll += design.weight[i] * (design.z[i] * eta - eta.exp());
    }
    ll
}

/// Michael-Schucany-Haas inverse-Gaussian draw.
fn inverse_gaussian(rng: &mut ChaCha8Rng, mean: f64, shape: f64) -> f64 {
    let v: f64 = rng.sample(StandardNormal);
    let y = v * v;
    let x = mean + mean * mean * y / (2.0 * shape)
        - (mean / (2.0 * shape)) * (4.0 * mean * shape * y + mean * mean * y * y).sqrt();
    let x = x.max(1e-300);
    let u: f64 = rng.gen();
    if u <= mean / (mean + x) {
        x
    } else {
        mean * mean / x
    }
}

struct PriorState {
    /// Per-column Gaussian variance; refreshed by Gibbs under Laplace.
    variances: Vec<f64>,
    laplace_gamma: Option<f64>,
}

impl PriorState {
    fn init(prior: &Prior, design: &DesignData) -> Result<Self, McmcError> {
        let p = design.n_cols();
        match prior {
            Prior::Gaussian { variances } => {
                let v = if variances.len() == 1 {
                    vec![variances[0]; p]
                } else if variances.len() == p {
                    variances.clone()
                } else {
                    return Err(McmcError::BadPrior(format!(
                        "{} variances for {} columns",
                        variances.len(),
                        p
                    )));
                };
                if v.iter().any(|&x| !(x > 0.0)) {
                    return Err(McmcError::BadPrior("variances must be > 0".to_string()));
                }
                Ok(PriorState {
                    variances: v,
                    laplace_gamma: None,
                })
            }
            Prior::Laplace { gamma } => {
                if !(*gamma > 0.0) {
                    return Err(McmcError::BadPrior(format!(
                        "laplace gamma must be > 0 (got {gamma})"
                    )));
                }
                // Start latent variances at the prior mean 2 / gamma^2.
                let v = (0..p)
                    .map(|j| {
                        if design.penalized[j] {
                            2.0 / (gamma * gamma)
                        } else {
                            DIFFUSE_VAR
                        }
                    })
                    .collect();
                Ok(PriorState {
                    variances: v,
                    laplace_gamma: Some(*gamma),
                })
            }
        }
    }

    fn log_density(&self, beta: &DVector<f64>) -> f64 {
        beta.iter()
            .zip(&self.variances)
            .map(|(b, v)| -0.5 * b * b / v)
            .sum()
    }

    /// Park-Casella Gibbs refresh: `1/sigma_k^2 ~ IG(gamma/|alpha_k|, gamma^2)`.
    fn gibbs_refresh(&mut self, design: &DesignData, beta: &DVector<f64>, rng: &mut ChaCha8Rng) {
        if let Some(gamma) = self.laplace_gamma {
            for j in 0..beta.len() {
                if !design.penalized[j] {
                    continue;
                }
                let abs_b = beta[j].abs().max(1e-10);
                let inv_sigma2 = inverse_gaussian(rng, gamma / abs_b, gamma * gamma);
                self.variances[j] = 1.0 / inv_sigma2;
            }
        }
    }
}

/// Adaptive random-walk Metropolis targeting `poisson_loglik + log prior`.
///
/// Under the Laplace prior each iteration first refreshes the latent
/// variances by their exact conditional, then takes a Gaussian-prior
/// Metropolis step on beta. The proposal adapts toward 0.234 acceptance
/// during burn-in and is frozen afterwards.
pub fn sample_beta(
    design: &DesignData,
    prior: &Prior,
    n_iter: usize,
    n_burn: usize,
    seed: u64,
) -> Result<McmcChain, McmcError> {
    if n_burn >= n_iter {
        return Err(McmcError::BadIterations { n_iter, n_burn });
    }
    let p = design.n_cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prior_state = PriorState::init(prior, design)?;

    let mut beta = DVector::zeros(p);
    let mut ll = loglik(design, &beta);
    if !ll.is_finite() {
        return Err(McmcError::NonFiniteInit);
    }

    // Per-coordinate proposal scales from the chain's running variance,
    // plus a global scale adapting toward the target acceptance rate.
    let mut log_scale: f64 = (2.38 / (p as f64).sqrt()).ln();
    let mut prop_sd = vec![0.1; p];
    let mut run_mean = vec![0.0; p];
    let mut run_m2 = vec![0.0; p];

    let n_kept = n_iter - n_burn;
    let mut draws = DMatrix::zeros(n_kept, p);
    let mut sigma2_draws = prior_state
        .laplace_gamma
        .map(|_| DMatrix::zeros(n_kept, p));
    let mut accepted_post = 0usize;
    let mut proposal = DVector::zeros(p);

    for iter in 0..n_iter {
        prior_state.gibbs_refresh(design, &beta, &mut rng);
        let mut lp = ll + prior_state.log_density(&beta);

        let scale = log_scale.exp();
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            proposal[j] = beta[j] + scale * prop_sd[j] * z;
        }
        let cand_ll = loglik(design, &proposal);
        let cand_lp = cand_ll + prior_state.log_density(&proposal);
        let alpha = if cand_lp.is_finite() {
            (cand_lp - lp).exp().min(1.0)
        } else {
            0.0
        };
        if rng.gen::<f64>() < alpha {
            beta.copy_from(&proposal);
            ll = cand_ll;
            lp = cand_lp;
            if iter >= n_burn {
                accepted_post += 1;
            }
        }
        let _ = lp;

        if iter < n_burn {
            // Robbins-Monro on the global scale (clamped), Welford on
            // coordinates.
            let rate = (1.0 / (1.0 + iter as f64).powf(0.6)).min(0.1);
            log_scale = (log_scale + rate * (alpha - TARGET_ACCEPTANCE)).clamp(-8.0, 2.0);
            for j in 0..p {
                let d = beta[j] - run_mean[j];
                run_mean[j] += d / (iter as f64 + 1.0);
                run_m2[j] += d * (beta[j] - run_mean[j]);
            }
            if iter > 50 && iter % 25 == 0 {
                for j in 0..p {
                    let var = run_m2[j] / iter as f64;
                    if var > 0.0 {
                        prop_sd[j] = var.sqrt().max(1e-6);
                    }
                }
            }
        } else {
            let k = iter - n_burn;
            for j in 0..p {
                draws[(k, j)] = beta[j];
            }
            if let Some(s2) = sigma2_draws.as_mut() {
                for j in 0..p {
                    s2[(k, j)] = prior_state.variances[j];
                }
            }
        }
    }

    if accepted_post == 0 && n_kept > 100 {
        return Err(McmcError::ZeroAcceptance {
            n_kept,
            scale: log_scale.exp(),
        });
    }

    Ok(McmcChain {
        draws,
        sigma2_draws,
        acceptance_rate: vec![accepted_post as f64 / n_kept as f64],
        seed,
        col_names: design.col_names.clone(),
    })
}

/// Everything needed to go from a raw track to a per-path posterior.
pub struct CompositionConfig<'a> {
    pub grid: &'a RasterGrid,
    pub specs: &'a [CovariateSpec],
    pub spline: SplineConfig,
    pub ctcrw: CtcrwParams,
    /// Fine-grid step for path draws (seconds).
    pub delta: f64,
    pub prior: Prior,
    pub design_options: DesignOptions,
}

/// Composition sampling: draw paths from the imputation distribution, run
/// [`sample_beta`] on each, and concatenate the post-burn-in draws. Path k
/// uses the deterministic child seeds of `seed`, so results are
/// reproducible and independent of scheduling.
pub fn composition_sample(
    track: &Track,
    config: &CompositionConfig,
    k_paths: usize,
    n_iter: usize,
    n_burn: usize,
    seed: u64,
) -> Result<McmcChain, McmcError> {
    let chains: Vec<Result<McmcChain, McmcError>> = (0..k_paths)
        .into_par_iter()
        .map(|k| {
            let path_seed = child_seed(seed, k as u64);
            let chain_seed = child_seed(seed, (k_paths + k) as u64);
            let path = draw_path(track, &config.ctcrw, config.delta, path_seed)?;
            let dp = discretize(&path, config.grid)?;
            let design = build_design_with(
                &dp,
                config.grid,
                config.specs,
                config.spline,
                config.design_options,
            )?;
            sample_beta(&design, &config.prior, n_iter, n_burn, chain_seed)
        })
        .collect();

    let mut all: Option<McmcChain> = None;
    for chain in chains {
        let chain = chain?;
        match all.as_mut() {
            None => all = Some(chain),
            Some(acc) => {
                let old = acc.draws.nrows();
                let add = chain.draws.nrows();
                let mut merged = DMatrix::zeros(old + add, acc.draws.ncols());
                merged.view_mut((0, 0), (old, acc.draws.ncols())).copy_from(&acc.draws);
                merged
                    .view_mut((old, 0), (add, chain.draws.ncols()))
                    .copy_from(&chain.draws);
                acc.draws = merged;
                acc.acceptance_rate.extend(chain.acceptance_rate);
                acc.sigma2_draws = None; // heterogeneous across paths; not kept
            }
        }
    }
    Ok(all.expect("k_paths >= 1"))
}
