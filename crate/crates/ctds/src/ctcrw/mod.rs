//! Continuous-time correlated random walk: the imputation distribution.
//!
//! Movement follows an integrated Ornstein-Uhlenbeck velocity process,
//! `dv(t) = gamma_ou * (mu - v(t)) dt + sigma_ou * dW(t)`, observed at fix
//! times with Gaussian error. The model discretizes exactly to a linear
//! state-space form per axis with state (position, velocity), so the
//! likelihood, smoother, and conditional path draws all come from the
//! Kalman recursions.

mod draw;
mod kalman;

pub use draw::{draw_path, smooth_track, SmoothedPoint};
pub use kalman::{ou_transition, OuTransition};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::track::{Track, TrackError};

#[derive(Debug, Error)]
pub enum CtcrwError {
    #[error("invalid CTCRW parameters: {0}")]
    InvalidParams(String),
    #[error("time step must be positive (got {0})")]
    BadDelta(f64),
    #[error("non-finite value in Kalman recursion ({context}) with gamma_ou={gamma_ou}, sigma_ou={sigma_ou}, obs_sd={obs_sd}")]
    NonFinite {
        context: String,
        gamma_ou: f64,
        sigma_ou: f64,
        obs_sd: f64,
    },
    #[error("optimizer did not converge in {max_iter} iterations (best loglik {loglik})")]
    NonConvergence {
        max_iter: usize,
        loglik: f64,
        best: Box<CtcrwFit>,
    },
    #[error("track has {got} fixes, need at least {need} to fit")]
    TooShort { got: usize, need: usize },
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// Parameters of the OU-velocity movement model.
///
/// `gamma_ou`/`sigma_ou` are named to avoid collision with the lasso
/// penalty weight used elsewhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtcrwParams {
    /// Mean-reversion rate of the velocity (1/seconds).
    pub gamma_ou: f64,
    /// Velocity diffusion scale.
    pub sigma_ou: f64,
    /// Long-run drift velocity (m/s); zero for home-range movement.
    pub mu: (f64, f64),
    /// Observation noise standard deviation (meters).
    pub obs_sd: f64,
}

impl CtcrwParams {
    pub fn new(gamma_ou: f64, sigma_ou: f64, obs_sd: f64) -> Result<Self, CtcrwError> {
        let p = CtcrwParams {
            gamma_ou,
            sigma_ou,
            mu: (0.0, 0.0),
            obs_sd,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_mu(mut self, mu: (f64, f64)) -> Self {
        self.mu = mu;
        self
    }

    pub fn validate(&self) -> Result<(), CtcrwError> {
        if !(self.gamma_ou > 0.0) || !self.gamma_ou.is_finite() {
            return Err(CtcrwError::InvalidParams(format!(
                "gamma_ou must be > 0 (got {})",
                self.gamma_ou
            )));
        }
        if !(self.sigma_ou > 0.0) || !self.sigma_ou.is_finite() {
            return Err(CtcrwError::InvalidParams(format!(
                "sigma_ou must be > 0 (got {})",
                self.sigma_ou
            )));
        }
        if !(self.obs_sd >= 0.0) || !self.obs_sd.is_finite() {
            return Err(CtcrwError::InvalidParams(format!(
                "obs_sd must be >= 0 (got {})",
                self.obs_sd
            )));
        }
        if !self.mu.0.is_finite() || !self.mu.1.is_finite() {
            return Err(CtcrwError::InvalidParams("mu must be finite".to_string()));
        }
        Ok(())
    }

    /// Stationary velocity variance `sigma_ou^2 / (2 gamma_ou)`.
    pub fn stationary_velocity_variance(&self) -> f64 {
        self.sigma_ou * self.sigma_ou / (2.0 * self.gamma_ou)
    }

    /// Rough data-driven starting point for [`fit_ctcrw`]: mean-reversion at
    /// the median fix interval and a diffusion matching observed speeds.
    pub fn heuristic_init(track: &Track) -> Result<Self, CtcrwError> {
        track.validate()?;
        let dt = track.median_fix_interval();
        let mut speed2_sum = 0.0;
        let mut n = 0usize;
        for w in 0..track.len() - 1 {
            let gap = track.times[w + 1] - track.times[w];
            let dx = track.positions[w + 1].0 - track.positions[w].0;
            let dy = track.positions[w + 1].1 - track.positions[w].1;
            speed2_sum += (dx * dx + dy * dy) / (gap * gap);
            n += 1;
        }
        // Per-axis velocity variance is half the mean squared speed.
        let vel_var = (speed2_sum / n as f64 / 2.0).max(1e-12);
        let gamma = 1.0 / dt.max(1.0);
        let sigma = (2.0 * gamma * vel_var).sqrt();
        CtcrwParams::new(gamma, sigma, 1.0)
    }
}

/// One conditional draw of the continuous path on a fine regular grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputedPath {
    pub times: Vec<f64>,
    pub positions: Vec<(f64, f64)>,
    pub source_track: String,
    pub draw_seed: u64,
}

impl ImputedPath {
    /// Grid step; times are regular by construction.
    pub fn delta(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Position at time `t` by linear interpolation. `None` outside the span.
    pub fn position_at(&self, t: f64) -> Option<(f64, f64)> {
        if self.times.is_empty() || t < self.times[0] || t > *self.times.last().unwrap() {
            return None;
        }
        let idx = match self
            .times
            .binary_search_by(|x| x.partial_cmp(&t).unwrap())
        {
            Ok(i) => return Some(self.positions[i]),
            Err(i) => i,
        };
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let w = (t - t0) / (t1 - t0);
        let (x0, y0) = self.positions[idx - 1];
        let (x1, y1) = self.positions[idx];
        Some((x0 + w * (x1 - x0), y0 + w * (y1 - y0)))
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Exact Gaussian log-likelihood of a track under the CTCRW state-space
/// model. Axes are independent and their contributions add.
pub fn kalman_loglik(track: &Track, params: &CtcrwParams) -> Result<f64, CtcrwError> {
    track.validate()?;
    params.validate()?;
    kalman::track_loglik(track, params)
}

/// Result of maximizing [`kalman_loglik`] over the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtcrwFit {
    pub params: CtcrwParams,
    pub loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Estimate the drift velocity instead of fixing it at zero.
    pub estimate_mu: bool,
    pub max_iter: usize,
    /// Relative log-likelihood spread at which the simplex is converged.
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            estimate_mu: false,
            max_iter: 500,
            rel_tol: 1e-8,
        }
    }
}

const OBS_SD_EPS: f64 = 1e-6;

/// Maximum-likelihood fit of (gamma_ou, sigma_ou, obs_sd) by Nelder-Mead
/// over log-transformed parameters, with mu fixed at zero unless
/// `options.estimate_mu` is set.
pub fn fit_ctcrw(track: &Track, init: CtcrwParams) -> Result<CtcrwFit, CtcrwError> {
    fit_ctcrw_with(track, init, FitOptions::default())
}

pub fn fit_ctcrw_with(
    track: &Track,
    init: CtcrwParams,
    options: FitOptions,
) -> Result<CtcrwFit, CtcrwError> {
    track.validate()?;
    init.validate()?;
    if track.len() < 4 {
        return Err(CtcrwError::TooShort {
            got: track.len(),
            need: 4,
        });
    }

    let theta_to_params = move |theta: &[f64]| -> CtcrwParams {
        let mu = if options.estimate_mu {
            (theta[3], theta[4])
        } else {
            (0.0, 0.0)
        };
        CtcrwParams {
            gamma_ou: theta[0].exp(),
            sigma_ou: theta[1].exp(),
            mu,
            obs_sd: (theta[2].exp() - OBS_SD_EPS).max(0.0),
        }
    };
    let objective = |theta: &[f64]| -> f64 {
        let p = theta_to_params(theta);
        match kalman::track_loglik(track, &p) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    };

    let mut theta0 = vec![
        init.gamma_ou.ln(),
        init.sigma_ou.ln(),
        (init.obs_sd + OBS_SD_EPS).ln(),
    ];
    let mut steps = vec![0.5, 0.5, 0.5];
    if options.estimate_mu {
        theta0.push(init.mu.0);
        theta0.push(init.mu.1);
        steps.push(0.1);
        steps.push(0.1);
    }

    let result = crate::optim::nelder_mead(&objective, &theta0, &steps, options.max_iter, options.rel_tol);
    let params = theta_to_params(&result.best);
    let fit = CtcrwFit {
        params,
        loglik: -result.f_best,
        converged: result.converged,
        n_iter: result.n_iter,
    };
    if !result.converged {
        return Err(CtcrwError::NonConvergence {
            max_iter: options.max_iter,
            loglik: fit.loglik,
            best: Box::new(fit),
        });
    }
    Ok(fit)
}

/// Simulates an exact state path at the given times and returns noisy
/// position observations as a [`Track`].
pub fn simulate_track(
    params: &CtcrwParams,
    times: &[f64],
    start: (f64, f64),
    seed: u64,
) -> Result<Track, CtcrwError> {
    params.validate()?;
    kalman::simulate_track(params, times, start, seed)
}
