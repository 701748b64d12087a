//! Periodic (cyclic) B-spline basis for varying coefficients.
//!
//! A coefficient that changes with time of day is expanded as
//! `beta(t) = sum_k alpha_k * phi_k(t)` where the `phi_k` are degree-`d`
//! B-splines on uniformly spaced knots wrapped around one period. The basis
//! is nonnegative and sums to one at every `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("period ({period}) must be a positive multiple of knot spacing ({knot_spacing})")]
    BadKnots { period: f64, knot_spacing: f64 },
    #[error("spline degree must be >= 1 (got {0})")]
    BadDegree(usize),
}

/// Uniform periodic B-spline configuration.
///
/// `n_basis` equals `period / knot_spacing`; with the defaults (24 h period,
/// 6 h knots, cubic) that is 4 basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub period: f64,
    pub knot_spacing: f64,
    pub degree: usize,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            period: 86_400.0,
            knot_spacing: 21_600.0,
            degree: 3,
        }
    }
}

impl SplineConfig {
    pub fn new(period: f64, knot_spacing: f64, degree: usize) -> Result<Self, SplineError> {
        let cfg = SplineConfig {
            period,
            knot_spacing,
            degree,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        if self.degree < 1 {
            return Err(SplineError::BadDegree(self.degree));
        }
        if !(self.period > 0.0) || !(self.knot_spacing > 0.0) {
            return Err(SplineError::BadKnots {
                period: self.period,
                knot_spacing: self.knot_spacing,
            });
        }
        let ratio = self.period / self.knot_spacing;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(SplineError::BadKnots {
                period: self.period,
                knot_spacing: self.knot_spacing,
            });
        }
        Ok(())
    }

    /// Number of basis functions in one period.
    pub fn n_basis(&self) -> usize {
        (self.period / self.knot_spacing).round() as usize
    }

    /// Evaluates all basis functions at clock time `t` (wrapped modulo the
    /// period). The result is nonnegative and sums to one.
    pub fn basis(&self, t: f64) -> Vec<f64> {
        let n = self.n_basis();
        let mut out = vec![0.0; n];
        // Wrap the clock time first: fmod is exact, so t and t + period
        // produce bit-identical bases.
        let mut tw = t % self.period;
        if tw < 0.0 {
            tw += self.period;
        }
        let u0 = (tw / self.knot_spacing).min(n as f64);
        for (j, slot) in out.iter_mut().enumerate() {
            // phi_j(t) = sum over period wraps of the cardinal B-spline
            // B_d anchored at knot j.
            let mut u = u0 - j as f64;
            u -= (u / n as f64).floor() * n as f64; // fold into [0, n)
            let mut acc = 0.0;
            let mut k = 0.0;
            while u + k * (n as f64) < (self.degree + 1) as f64 {
                acc += cardinal_bspline(self.degree, u + k * (n as f64));
                k += 1.0;
            }
            *slot = acc;
        }
        out
    }
}

/// Cardinal B-spline of degree `d` on integer knots, supported on `[0, d+1]`.
fn cardinal_bspline(d: usize, u: f64) -> f64 {
    if u < 0.0 || u >= (d + 1) as f64 {
        return 0.0;
    }
    if d == 0 {
        return 1.0;
    }
    let dd = d as f64;
    (u / dd) * cardinal_bspline(d - 1, u) + ((dd + 1.0 - u) / dd) * cardinal_bspline(d - 1, u - 1.0)
}
