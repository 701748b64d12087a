//! Combining per-imputation fits: Rubin's rules and design stacking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::DesignData;
use crate::glm::GlmFit;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("need at least 2 fits to pool (got {0})")]
    TooFew(usize),
    #[error("column sets differ; symmetric difference: {0:?}")]
    ColumnMismatch(Vec<String>),
    #[error("no designs to stack")]
    NothingToStack,
}

const Z_95: f64 = 1.959963984540054;

/// Pooled posterior approximation: mean, and within-plus-between variance
/// with the finite-K correction `(1 + 1/K)` on the between component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub k: usize,
    /// Average within-imputation covariance.
    pub within: DMatrix<f64>,
    /// Between-imputation covariance of the point estimates.
    pub between: DMatrix<f64>,
    /// Factor applied to `between` (1 + 1/K, or 1 when disabled).
    pub correction: f64,
    pub col_names: Vec<String>,
}

impl PooledFit {
    pub fn se(&self, j: usize) -> f64 {
        self.covariance[(j, j)].sqrt()
    }

    /// Symmetric Gaussian 95% interval for one coefficient.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let se = self.se(j);
        (self.mean[j] - Z_95 * se, self.mean[j] + Z_95 * se)
    }

    pub fn report(&self) -> PooledReport {
        let rows = (0..self.mean.len())
            .map(|j| {
                let (lo, hi) = self.interval(j);
                CoefficientRow {
                    name: self.col_names[j].clone(),
                    estimate: self.mean[j],
                    se: self.se(j),
                    lower: lo,
                    upper: hi,
                    starred: lo > 0.0 || hi < 0.0,
                }
            })
            .collect();
        PooledReport {
            k: self.k,
            rows,
        }
    }
}

/// Coefficient-table report (one row per column, starred when the 95%
/// interval excludes zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledReport {
    pub k: usize,
    pub rows: Vec<CoefficientRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub starred: bool,
}

fn check_columns(names: &[Vec<String>]) -> Result<(), PoolError> {
    let first: std::collections::BTreeSet<&String> = names[0].iter().collect();
    for other in &names[1..] {
        let set: std::collections::BTreeSet<&String> = other.iter().collect();
        if set != first {
            let diff: Vec<String> = first
                .symmetric_difference(&set)
                .map(|s| s.to_string())
                .collect();
            return Err(PoolError::ColumnMismatch(diff));
        }
    }
    Ok(())
}

/// Rubin's combining rules over per-imputation maximum-likelihood fits.
pub fn pool(fits: &[GlmFit]) -> Result<PooledFit, PoolError> {
    pool_with_correction(fits, true)
}

pub fn pool_with_correction(fits: &[GlmFit], finite_k: bool) -> Result<PooledFit, PoolError> {
    if fits.len() < 2 {
        return Err(PoolError::TooFew(fits.len()));
    }
    check_columns(&fits.iter().map(|f| f.col_names.clone()).collect::<Vec<_>>())?;
    let k = fits.len();
    let p = fits[0].beta_hat.len();

    let mut mean = DVector::zeros(p);
    let mut within = DMatrix::zeros(p, p);
    for f in fits {
        mean += &f.beta_hat;
        within += &f.covariance;
    }
    mean /= k as f64;
    within /= k as f64;

    let mut between = DMatrix::zeros(p, p);
    for f in fits {
        let d = &f.beta_hat - &mean;
        between += &d * d.transpose();
    }
    between /= (k - 1) as f64;

    let correction = if finite_k { 1.0 + 1.0 / k as f64 } else { 1.0 };
    let covariance = &within + &between * correction;

    Ok(PooledFit {
        mean,
        covariance,
        k,
        within,
        between,
        correction,
        col_names: fits[0].col_names.clone(),
    })
}

/// Row-concatenates designs with per-row weight 1/K so the stacked
/// objective estimates the average per-imputation log-likelihood. Fitting
/// the lasso on the stack forces each coefficient to be zero for all
/// imputations or nonzero for all.
pub fn stack_designs(designs: &[DesignData]) -> Result<DesignData, PoolError> {
    if designs.is_empty() {
        return Err(PoolError::NothingToStack);
    }
    check_columns(
        &designs
            .iter()
            .map(|d| d.col_names.clone())
            .collect::<Vec<_>>(),
    )?;
    let k = designs.len() as f64;
    let p = designs[0].n_cols();
    let total_rows: usize = designs.iter().map(|d| d.n_rows()).sum();

    let mut x = DMatrix::zeros(total_rows, p);
    let mut z = Vec::with_capacity(total_rows);
    let mut offset = Vec::with_capacity(total_rows);
    let mut tau = Vec::with_capacity(total_rows);
    let mut weight = Vec::with_capacity(total_rows);
    let mut block = Vec::with_capacity(total_rows);
    let mut row_transition = Vec::with_capacity(total_rows);
    let mut row_neighbor = Vec::with_capacity(total_rows);
    let mut row_direction = Vec::with_capacity(total_rows);

    let mut row_base = 0;
    let mut block_base = 0;
    for d in designs {
        x.view_mut((row_base, 0), (d.n_rows(), p)).copy_from(&d.x);
        z.extend_from_slice(&d.z);
        offset.extend_from_slice(&d.offset);
        tau.extend_from_slice(&d.tau);
        weight.extend(d.weight.iter().map(|w| w / k));
        block.extend(d.block.iter().map(|b| b + block_base));
        row_transition.extend_from_slice(&d.row_transition);
        row_neighbor.extend_from_slice(&d.row_neighbor);
        row_direction.extend_from_slice(&d.row_direction);
        row_base += d.n_rows();
        block_base += d.n_blocks();
    }

    Ok(DesignData {
        x,
        z,
        offset,
        tau,
        weight,
        block,
        row_transition,
        row_neighbor,
        row_direction,
        col_names: designs[0].col_names.clone(),
        col_group: designs[0].col_group.clone(),
        penalized: designs[0].penalized.clone(),
    })
}
