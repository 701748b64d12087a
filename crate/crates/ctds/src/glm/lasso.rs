//! L1-penalized Poisson fit by coordinate descent.
//!
//! The penalty applies in standardized space: penalized columns are scaled
//! to unit tau-weighted variance (and centered when an unpenalized
//! intercept family can absorb the shift), soft-thresholding runs inside an
//! IRLS outer loop, and coefficients are mapped back to the original scale.
//! Zero coefficients are exact.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cv::CvCurve;
use super::{chol_solve, loglik_value, weighted_normal_equations, GlmError, MAX_ETA};
use crate::design::DesignData;

/// Lasso solution at one penalty value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoFit {
    /// Coefficients on the original column scale; zeros are exact.
    pub beta_hat: DVector<f64>,
    /// Penalty weight the fit was computed at.
    pub penalty: f64,
    /// Indices of nonzero coefficients.
    pub active_set: Vec<usize>,
    /// Cross-validation curve, when the fit came from [`super::cv_lasso`].
    pub cv_curve: Option<CvCurve>,
    pub col_names: Vec<String>,
}

/// Standardization state for the penalized columns.
pub(crate) struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Whether centering could be absorbed by an unpenalized intercept
    /// family (columns of one group summing to 1 on every row).
    pub centered: bool,
    /// Columns of the absorbing family.
    pub intercept_cols: Vec<usize>,
    /// Penalized columns with ~zero variance are frozen at coefficient 0.
    pub frozen: Vec<bool>,
}

pub(crate) fn standardize(design: &DesignData) -> Standardization {
    let p = design.n_cols();
    let n = design.n_rows();
    let mut mean = vec![0.0; p];
    let mut scale = vec![1.0; p];
    let mut frozen = vec![false; p];

    // Find an unpenalized family that spans constants.
    let mut intercept_cols: Vec<usize> = Vec::new();
    let mut groups: Vec<&String> = Vec::new();
    for g in &design.col_group {
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    for g in groups {
        let cols: Vec<usize> = (0..p).filter(|&j| &design.col_group[j] == g).collect();
        if cols.iter().any(|&j| design.penalized[j]) {
            continue;
        }
        let spans_unity = (0..n).all(|i| {
            let s: f64 = cols.iter().map(|&j| design.x[(i, j)]).sum();
            (s - 1.0).abs() < 1e-9
        });
        if n > 0 && spans_unity {
            intercept_cols = cols;
            break;
        }
    }
    let centered = !intercept_cols.is_empty();

    let u_total: f64 = (0..n).map(|i| design.weight[i] * design.tau[i]).sum();
    for j in 0..p {
        if !design.penalized[j] {
            continue;
        }
        let col = design.x.column(j);
        let mut m = 0.0;
        for i in 0..n {
            m += design.weight[i] * design.tau[i] * col[i];
        }
        m /= u_total;
        let mut v = 0.0;
        for i in 0..n {
            let d = col[i] - m;
            v += design.weight[i] * design.tau[i] * d * d;
        }
        v /= u_total;
        if v.sqrt() < 1e-12 {
            frozen[j] = true;
            continue;
        }
        mean[j] = if centered { m } else { 0.0 };
        scale[j] = v.sqrt();
    }
    Standardization {
        mean,
        scale,
        centered,
        intercept_cols,
        frozen,
    }
}

/// Value of standardized column `j` at row `i`.
#[inline]
fn x_std(design: &DesignData, st: &Standardization, i: usize, j: usize) -> f64 {
    if design.penalized[j] {
        (design.x[(i, j)] - st.mean[j]) / st.scale[j]
    } else {
        design.x[(i, j)]
    }
}

/// Null-model fit (unpenalized columns only); used for `gamma_max` and as
/// the lasso starting point.
fn fit_null(design: &DesignData) -> Result<DVector<f64>, GlmError> {
    let p = design.n_cols();
    let free: Vec<usize> = (0..p).filter(|&j| !design.penalized[j]).collect();
    let mut beta = DVector::zeros(p);
    if free.is_empty() {
        return Ok(beta);
    }
    let n = design.n_rows();
    let mut ll = loglik_value(design, &beta);
    for _ in 0..100 {
        let mut w = vec![0.0; n];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let eta = design.offset[i] + design.x.row(i).transpose().dot(&beta);
            let mu = eta.min(MAX_ETA).exp();
            w[i] = design.weight[i] * mu;
            r[i] = design.weight[i] * (design.z[i] - mu);
        }
        let (h_full, g_full) = weighted_normal_equations(design, &w, &r);
        let k = free.len();
        let mut h = DMatrix::zeros(k, k);
        let mut g = DVector::zeros(k);
        for (a, &ja) in free.iter().enumerate() {
            g[a] = g_full[ja];
            for (b, &jb) in free.iter().enumerate() {
                h[(a, b)] = h_full[(ja, jb)];
            }
        }
        let dir = chol_solve(&h, std::slice::from_ref(&g)).map_err(|c| {
            GlmError::RankDeficient {
                column: design.col_names[free[c]].clone(),
            }
        })?;
        let dir = &dir[0];
        if g.dot(dir).abs() < 1e-12 * (1.0 + ll.abs()) {
            return Ok(beta);
        }
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = beta.clone();
            for (a, &j) in free.iter().enumerate() {
                cand[j] += step * dir[a];
            }
            let cand_ll = loglik_value(design, &cand);
            if cand_ll > ll - 1e-14 {
                let delta = cand_ll - ll;
                beta = cand;
                ll = cand_ll;
                improved = true;
                if delta.abs() < 1e-12 * (1.0 + ll.abs()) {
                    return Ok(beta);
                }
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(beta)
}

/// Smallest penalty at which every penalized coefficient is exactly zero:
/// the largest absolute standardized score at the null model, padded by a
/// margin just above the solver's KKT tolerance so the all-zero property
/// is robust to the null fit's own convergence slop.
pub fn gamma_max(design: &DesignData) -> Result<f64, GlmError> {
    if design.n_rows() == 0 {
        return Err(GlmError::EmptyDesign);
    }
    let st = standardize(design);
    // Converge the unpenalized columns with the same machinery the lasso
    // itself uses (penalized coordinates cannot enter at this penalty).
    let beta = fit_lasso_std(design, &st, 1e30, None)?;
    let n = design.n_rows();
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let mut eta = design.offset[i];
        for j in 0..design.n_cols() {
            if beta[j] != 0.0 {
                eta += x_std(design, &st, i, j) * beta[j];
            }
        }
        resid[i] = design.weight[i] * (design.z[i] - eta.min(MAX_ETA).exp());
    }
    let mut best: f64 = 0.0;
    for j in 0..design.n_cols() {
        if !design.penalized[j] || st.frozen[j] {
            continue;
        }
        let mut s = 0.0;
        for i in 0..n {
            s += x_std(design, &st, i, j) * resid[i];
        }
        best = best.max(s.abs());
    }
    Ok(best + 1e-7 * (1.0 + best))
}

const OUTER_MAX: usize = 500;
const INNER_MAX: usize = 10_000;
const KKT_TARGET: f64 = 1e-8;

/// Coordinate-descent maximizer of `loglik - gamma * sum |alpha_j|` over
/// standardized penalized columns, returned on the original scale.
pub fn fit_lasso(design: &DesignData, gamma: f64) -> Result<LassoFit, GlmError> {
    let st = standardize(design);
    let beta_std = fit_lasso_std(design, &st, gamma, None)?;
    Ok(finish_fit(design, &st, beta_std, gamma, None))
}

/// Warm-started fits along a penalty grid (sorted descending internally).
///
/// Active-set size is usually non-increasing in the penalty, but coordinate
/// descent offers no guarantee; treat violations as a diagnostic, not an
/// invariant.
pub fn lasso_path(design: &DesignData, gammas: &[f64]) -> Result<Vec<LassoFit>, GlmError> {
    let mut grid: Vec<f64> = gammas.to_vec();
    grid.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let st = standardize(design);
    let mut warm: Option<DVector<f64>> = None;
    let mut fits = Vec::with_capacity(grid.len());
    for &gamma in &grid {
        let b = fit_lasso_std(design, &st, gamma, warm.as_ref())?;
        fits.push(finish_fit(design, &st, b.clone(), gamma, None));
        warm = Some(b);
    }
    Ok(fits)
}

/// Back-transforms standardized coefficients and assembles the fit.
pub(crate) fn finish_fit(
    design: &DesignData,
    st: &Standardization,
    beta_std: DVector<f64>,
    gamma: f64,
    cv_curve: Option<CvCurve>,
) -> LassoFit {
    let p = design.n_cols();
    let mut beta = DVector::zeros(p);
    let mut shift = 0.0;
    for j in 0..p {
        if design.penalized[j] {
            beta[j] = beta_std[j] / st.scale[j];
            shift += beta_std[j] * st.mean[j] / st.scale[j];
        } else {
            beta[j] = beta_std[j];
        }
    }
    if st.centered {
        // eta contained -shift from the centered columns; restore it
        // through the intercept family (its basis sums to 1 row-wise).
        for &j in &st.intercept_cols {
            beta[j] -= shift;
        }
    }
    let active_set: Vec<usize> = (0..p)
        .filter(|&j| design.penalized[j] && beta[j] != 0.0)
        .collect();
    LassoFit {
        beta_hat: beta,
        penalty: gamma,
        active_set,
        cv_curve,
        col_names: design.col_names.clone(),
    }
}

/// Inner solver in standardized space, optionally warm-started.
pub(crate) fn fit_lasso_std(
    design: &DesignData,
    st: &Standardization,
    gamma: f64,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>, GlmError> {
    if !(gamma >= 0.0) {
        return Err(GlmError::BadPenalty(gamma));
    }
    if design.n_rows() == 0 {
        return Err(GlmError::EmptyDesign);
    }
    if !design.z.iter().any(|&z| z > 0.0) {
        return Err(GlmError::NoEvents);
    }
    let p = design.n_cols();
    let n = design.n_rows();
    let mut b = match warm {
        Some(w) => w.clone(),
        None => {
            let null = fit_null(design)?;
            // fit_null works on original columns; unpenalized entries carry
            // over directly (they are not rescaled).
            null
        }
    };

    let penalized_objective = |b: &DVector<f64>| -> f64 {
        let ll = loglik_std(design, st, b);
        let pen: f64 = (0..p)
            .filter(|&j| design.penalized[j])
            .map(|j| b[j].abs())
            .sum();
        ll - gamma * pen
    };

    let mut obj = penalized_objective(&b);
    for _outer in 0..OUTER_MAX {
        // Quadratic approximation at the current point.
        let mut eta = vec![0.0; n];
        let mut mu = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut score = vec![0.0; n];
        for i in 0..n {
            let mut e = design.offset[i];
            for j in 0..p {
                if b[j] != 0.0 {
                    e += x_std(design, st, i, j) * b[j];
                }
            }
            eta[i] = e;
            mu[i] = e.min(MAX_ETA).exp();
            w[i] = design.weight[i] * mu[i];
            score[i] = design.weight[i] * (design.z[i] - mu[i]);
        }
        let mut g0 = vec![0.0; p];
        let mut curv = vec![0.0; p];
        for j in 0..p {
            if st.frozen[j] {
                continue;
            }
            let mut g = 0.0;
            let mut a = 0.0;
            for i in 0..n {
                let x = x_std(design, st, i, j);
                g += x * score[i];
                a += w[i] * x * x;
            }
            g0[j] = g;
            curv[j] = a.max(1e-12);
        }

        // Coordinate descent on the quadratic surrogate.
        let mut delta = DVector::zeros(p);
        let mut q = vec![0.0; n]; // w .* (X_std * delta)
        for _inner in 0..INNER_MAX {
            let mut max_change: f64 = 0.0;
            for j in 0..p {
                if st.frozen[j] {
                    continue;
                }
                let mut hd = 0.0;
                for i in 0..n {
                    hd += x_std(design, st, i, j) * q[i];
                }
                // Partial gradient excluding the own-coordinate quadratic,
                // then solve for the new total coefficient b_j + delta_j
                // (the penalty applies to the total, not the step).
                let u = g0[j] - hd + curv[j] * delta[j];
                let target = u + curv[j] * b[j];
                let new_total = if design.penalized[j] {
                    soft_threshold(target, gamma) / curv[j]
                } else {
                    target / curv[j]
                };
                let new_dj = new_total - b[j];
                let change = new_dj - delta[j];
                if change != 0.0 {
                    for i in 0..n {
                        q[i] += w[i] * x_std(design, st, i, j) * change;
                    }
                    delta[j] = new_dj;
                    max_change = max_change.max(change.abs());
                }
            }
            if max_change < 1e-12 {
                break;
            }
        }

        // Near the optimum the exact objective cannot resolve the gain of
        // a tiny Newton step (f64 noise), so small steps are taken at face
        // value and convergence is judged on the KKT residual alone.
        if delta.amax() <= 1e-6 {
            b += &delta;
            obj = penalized_objective(&b);
            if kkt_residual_std(design, st, &b, gamma) <= KKT_TARGET {
                return Ok(snap_zeros(b));
            }
            continue;
        }
        // Large steps get a halving line search against the exact
        // penalized objective.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &b + &delta * step;
            let cand_obj = penalized_objective(&cand);
            if cand_obj >= obj - 1e-14 {
                b = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if kkt_residual_std(design, st, &b, gamma) <= KKT_TARGET {
                return Ok(snap_zeros(b));
            }
            return Err(GlmError::Divergence {
                n_iter: _outer,
                trace: vec![obj],
            });
        }
    }
    if kkt_residual_std(design, st, &b, gamma) <= 1e-6 {
        return Ok(snap_zeros(b));
    }
    Err(GlmError::Divergence {
        n_iter: OUTER_MAX,
        trace: vec![obj],
    })
}

/// Exact zeros survive the f64 arithmetic of soft thresholding, but snap
/// anything at round-off scale for safety.
fn snap_zeros(mut b: DVector<f64>) -> DVector<f64> {
    for v in b.iter_mut() {
        if v.abs() < 1e-300 {
            *v = 0.0;
        }
    }
    b
}

fn soft_threshold(u: f64, gamma: f64) -> f64 {
    if u > gamma {
        u - gamma
    } else if u < -gamma {
        u + gamma
    } else {
        0.0
    }
}

fn loglik_std(design: &DesignData, st: &Standardization, b: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for i in 0..design.n_rows() {
        let mut eta = design.offset[i];
        for j in 0..design.n_cols() {
            if b[j] != 0.0 {
                eta += x_std(design, st, i, j) * b[j];
            }
        }
        if eta > MAX_ETA {
            return f64::NEG_INFINITY;
        }
        ll += design.weight[i] * (design.z[i] * eta - eta.exp());
    }
    ll
}

/// Max KKT violation in standardized space.
fn kkt_residual_std(
    design: &DesignData,
    st: &Standardization,
    b: &DVector<f64>,
    gamma: f64,
) -> f64 {
    let n = design.n_rows();
    let p = design.n_cols();
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let mut eta = design.offset[i];
        for j in 0..p {
            if b[j] != 0.0 {
                eta += x_std(design, st, i, j) * b[j];
            }
        }
        resid[i] = design.weight[i] * (design.z[i] - eta.min(MAX_ETA).exp());
    }
    let mut worst: f64 = 0.0;
    for j in 0..p {
        if st.frozen[j] {
            continue;
        }
        let mut g = 0.0;
        for i in 0..n {
            g += x_std(design, st, i, j) * resid[i];
        }
        let v = if !design.penalized[j] {
            g.abs()
        } else if b[j] == 0.0 {
            (g.abs() - gamma).max(0.0)
        } else {
            (g - gamma * b[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Max KKT violation of a finished fit, recomputed from scratch: for zero
/// coefficients the standardized score must not exceed `gamma`; for active
/// ones it must equal `gamma * sign`.
pub fn lasso_kkt_residual(design: &DesignData, fit: &LassoFit) -> f64 {
    let st = standardize(design);
    // Rebuild standardized coefficients from the original-scale ones.
    let p = design.n_cols();
    let mut b = DVector::zeros(p);
    let mut shift = 0.0;
    for j in 0..p {
        if design.penalized[j] {
            b[j] = fit.beta_hat[j] * st.scale[j];
            shift += b[j] * st.mean[j] / st.scale[j];
        } else {
            b[j] = fit.beta_hat[j];
        }
    }
    if st.centered {
        for &j in &st.intercept_cols {
            b[j] += shift;
        }
    }
    kkt_residual_std(design, &st, &b, fit.penalty)
}

#[cfg(test)]
mod tests {
    use super::super::test_designs::random_design;
    use super::super::{fit_irls, poisson_loglik};
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_penalty_matches_irls() {
        let d = random_design(80, 3, &[-0.4, 0.5, -0.3, 0.0], 31);
        let mle = fit_irls(&d).unwrap();
        let lasso = fit_lasso(&d, 0.0).unwrap();
        for j in 0..d.n_cols() {
            assert_relative_eq!(lasso.beta_hat[j], mle.beta_hat[j], epsilon = 1e-5);
        }
    }

    #[test]
    fn gamma_max_zeroes_everything() {
        let d = random_design(50, 3, &[-0.3, 0.4, -0.2, 0.1], 37);
        let gm = gamma_max(&d).unwrap();
        for factor in [1.0, 1.5, 10.0] {
            let fit = fit_lasso(&d, gm * factor).unwrap();
            assert!(fit.active_set.is_empty(), "factor {factor}: {:?}", fit.active_set);
            for j in 1..d.n_cols() {
                assert_eq!(fit.beta_hat[j], 0.0);
            }
        }
        // Just below gamma_max something enters.
        let fit = fit_lasso(&d, gm * 0.99).unwrap();
        assert!(!fit.active_set.is_empty());
    }

    #[test]
    fn kkt_residuals_along_a_path() {
        let d = random_design(60, 4, &[-0.3, 0.4, 0.0, -0.25, 0.0], 41);
        let gm = gamma_max(&d).unwrap();
        for k in 0..8 {
            let gamma = gm * 0.8_f64.powi(k);
            let fit = fit_lasso(&d, gamma).unwrap();
            let kkt = lasso_kkt_residual(&d, &fit);
            assert!(kkt <= 1e-6, "gamma {gamma}: kkt {kkt}");
        }
    }

    #[test]
    fn solution_beats_random_perturbations() {
        use rand::Rng;
        use rand::SeedableRng;
        let d = random_design(40, 2, &[-0.3, 0.5, 0.2], 43);
        let gamma = gamma_max(&d).unwrap() * 0.3;
        let fit = fit_lasso(&d, gamma).unwrap();
        let objective = |beta: &DVector<f64>| -> f64 {
            let (ll, _) = poisson_loglik(&d, beta).unwrap();
            // Penalty applies on the standardized scale.
            let st = standardize(&d);
            let pen: f64 = (0..d.n_cols())
                .filter(|&j| d.penalized[j])
                .map(|j| (beta[j] * st.scale[j]).abs())
                .sum();
            ll - gamma * pen
        };
        let best = objective(&fit.beta_hat);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut cand = fit.beta_hat.clone();
            for v in cand.iter_mut() {
                *v += (rng.gen::<f64>() - 0.5) * 0.02;
            }
            assert!(objective(&cand) <= best + 1e-9);
        }
    }

    #[test]
    fn path_active_sets_mostly_shrink_with_penalty() {
        let d = random_design(80, 4, &[-0.3, 0.5, 0.2, 0.0, -0.4], 83);
        let gm = gamma_max(&d).unwrap();
        let gammas: Vec<f64> = (0..20).map(|k| gm * 0.75_f64.powi(k)).collect();
        let fits = lasso_path(&d, &gammas).unwrap();
        // Path is descending in gamma, so active sets should grow; count
        // violations as a soft diagnostic.
        let sizes: Vec<usize> = fits.iter().map(|f| f.active_set.len()).collect();
        let violations = sizes.windows(2).filter(|w| w[1] < w[0]).count();
        if violations > 0 {
            eprintln!("lasso path monotonicity violations: {violations} in sizes {sizes:?}");
        }
        assert_eq!(sizes[0], 0, "largest penalty should zero everything");
        assert!(sizes.last().unwrap() >= &2, "small penalty keeps signals");
        for f in &fits {
            assert!(lasso_kkt_residual(&d, f) <= 1e-6);
        }
    }

    #[test]
    fn zeros_are_exact_and_intercept_unpenalized() {
        let d = random_design(60, 3, &[-0.3, 0.6, 0.0, 0.0], 47);
        let gm = gamma_max(&d).unwrap();
        let fit = fit_lasso(&d, gm * 0.5).unwrap();
        // Intercept survives even at large penalties.
        assert!(fit.beta_hat[0] != 0.0);
        for j in 1..d.n_cols() {
            if !fit.active_set.contains(&j) {
                assert_eq!(fit.beta_hat[j], 0.0, "coefficient {j} not exactly zero");
            }
        }
    }
}
