//! Penalty selection by block-wise cross-validation.
//!
//! Folds partition transition blocks, never rows, so the one-hot structure
//! of each block stays intact. The penalty grid is 50 log-spaced points
//! from `gamma_max` down to `1e-3 * gamma_max`, fitted warm-start descending,
//! and the selected penalty minimizes held-out Poisson deviance (default:
//! the one-standard-error rule, which is the conservative choice).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lasso::{finish_fit, fit_lasso_std, gamma_max, standardize, LassoFit};
use super::{poisson_deviance, GlmError};
use crate::design::DesignData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionRule {
    /// Penalty minimizing mean held-out deviance.
    MinDeviance,
    /// Largest penalty within one standard error of the minimum.
    OneStdErr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvCurve {
    pub gammas: Vec<f64>,
    /// Mean held-out deviance per row.
    pub mean_deviance: Vec<f64>,
    /// Standard error of the fold means.
    pub se_deviance: Vec<f64>,
    pub chosen: f64,
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub n_folds: usize,
    /// Explicit penalty grid; defaults to 50 log-spaced points from
    /// `gamma_max` down to `1e-3 * gamma_max`.
    pub gamma_grid: Option<Vec<f64>>,
    pub rule: SelectionRule,
    pub seed: u64,
}

impl CvOptions {
    pub fn new(n_folds: usize, seed: u64) -> Self {
        CvOptions {
            n_folds,
            gamma_grid: None,
            rule: SelectionRule::OneStdErr,
            seed,
        }
    }
}

pub fn default_gamma_grid(g_max: f64) -> Vec<f64> {
    let n = 50;
    let lo = (g_max * 1e-3).ln();
    let hi = g_max.ln();
    (0..n)
        .map(|k| (hi + (lo - hi) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// 10-fold-style cross-validated lasso with the default grid and rule.
pub fn cv_lasso(design: &DesignData, n_folds: usize, seed: u64) -> Result<LassoFit, GlmError> {
    cv_lasso_with(design, CvOptions::new(n_folds, seed))
}

pub fn cv_lasso_with(design: &DesignData, options: CvOptions) -> Result<LassoFit, GlmError> {
    if options.n_folds < 2 {
        return Err(GlmError::BadFolds(format!(
            "need at least 2 folds (got {})",
            options.n_folds
        )));
    }
    let n_blocks = design.n_blocks();
    if n_blocks < options.n_folds {
        return Err(GlmError::BadFolds(format!(
            "{} blocks cannot fill {} folds",
            n_blocks, options.n_folds
        )));
    }
    let g_max = gamma_max(design)?;
    let grid = match &options.gamma_grid {
        Some(g) => {
            let mut g = g.clone();
            g.sort_by(|a, b| b.partial_cmp(a).unwrap());
            g
        }
        None => default_gamma_grid(g_max),
    };

    // Assign blocks to folds; re-randomize once if a fold lacks events.
    let mut assignment = assign_folds(design, options.n_folds, options.seed);
    if !folds_have_events(design, &assignment, options.n_folds) {
        assignment = assign_folds(design, options.n_folds, options.seed.wrapping_add(1));
        if !folds_have_events(design, &assignment, options.n_folds) {
            return Err(GlmError::FoldWithoutEvents);
        }
    }

    // Per fold: fit the path on the training blocks, score the held-out
    // blocks at every gamma.
    let fold_results: Vec<Result<(Vec<f64>, usize), GlmError>> = (0..options.n_folds)
        .into_par_iter()
        .map(|fold| {
            let train = design.subset_by_blocks(|b| assignment[b] != fold);
            let test = design.subset_by_blocks(|b| assignment[b] == fold);
            let st = standardize(&train);
            let mut deviances = Vec::with_capacity(grid.len());
            let mut warm = None;
            for &gamma in &grid {
                let b_std = fit_lasso_std(&train, &st, gamma, warm.as_ref())?;
                let fit = finish_fit(&train, &st, b_std.clone(), gamma, None);
                deviances.push(poisson_deviance(&test, &fit.beta_hat));
                warm = Some(b_std);
            }
            Ok((deviances, test.n_rows()))
        })
        .collect();

    let mut per_fold_mean = vec![Vec::with_capacity(options.n_folds); grid.len()];
    let mut total_rows = 0usize;
    let mut total_dev = vec![0.0; grid.len()];
    for fr in fold_results {
        let (devs, rows) = fr?;
        total_rows += rows;
        for (k, d) in devs.iter().enumerate() {
            total_dev[k] += d;
            per_fold_mean[k].push(d / rows as f64);
        }
    }
    let mean_deviance: Vec<f64> = total_dev.iter().map(|d| d / total_rows as f64).collect();
    let se_deviance: Vec<f64> = per_fold_mean
        .iter()
        .map(|folds| {
            let m = folds.iter().sum::<f64>() / folds.len() as f64;
            let var = folds.iter().map(|d| (d - m).powi(2)).sum::<f64>()
                / (folds.len() - 1) as f64;
            (var / folds.len() as f64).sqrt()
        })
        .collect();

    let min_idx = mean_deviance
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let chosen_idx = match options.rule {
        SelectionRule::MinDeviance => min_idx,
        SelectionRule::OneStdErr => {
            let threshold = mean_deviance[min_idx] + se_deviance[min_idx];
            // Grid is descending; the first gamma within the threshold is
            // the largest.
            (0..grid.len())
                .find(|&k| mean_deviance[k] <= threshold)
                .unwrap_or(min_idx)
        }
    };
    let chosen = grid[chosen_idx];

    // Refit on the full data at the chosen penalty.
    let st = standardize(design);
    let b_std = fit_lasso_std(design, &st, chosen, None)?;
    Ok(finish_fit(
        design,
        &st,
        b_std,
        chosen,
        Some(CvCurve {
            gammas: grid,
            mean_deviance,
            se_deviance,
            chosen,
        }),
    ))
}

fn assign_folds(design: &DesignData, n_folds: usize, seed: u64) -> Vec<usize> {
    let n_blocks = design.n_blocks();
    let mut order: Vec<usize> = (0..n_blocks).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n_blocks];
    for (pos, &b) in order.iter().enumerate() {
        assignment[b] = pos % n_folds;
    }
    assignment
}

fn folds_have_events(design: &DesignData, assignment: &[usize], n_folds: usize) -> bool {
    let mut events = vec![false; n_folds];
    for i in 0..design.n_rows() {
        if design.z[i] > 0.0 {
            events[assignment[design.block[i]]] = true;
        }
    }
    events.iter().all(|&e| e)
}
