//! Continuous-time discrete-space (CTDS) movement modelling.
//!
//! Telemetry fixes are turned into inference about drivers of movement in
//! four stages:
//!
//! 1. [`ctcrw`] fits a continuous-time correlated random walk (integrated
//!    Ornstein-Uhlenbeck velocity) to the fixes and draws fine-time
//!    conditional path imputations.
//! 2. [`discretize`] reduces each continuous path to the sequence of
//!    rook-adjacent raster cells and residence times.
//! 3. [`design`] expands the discrete path into the rows of a latent
//!    Poisson regression (one row per candidate neighbor per transition,
//!    with log residence time as offset), optionally with periodic-spline
//!    varying coefficients.
//! 4. [`glm`], [`pool`], and [`mcmc`] estimate the coefficients: IRLS
//!    maximum likelihood, lasso with cross-validation, Rubin pooling over
//!    imputations, or MCMC under Gaussian / Bayesian-lasso priors.
//!
//! [`simulate`] generates CTDS paths from known coefficients for validation
//! studies, and [`grid`] holds the raster-backed study-area graph.

pub mod ctcrw;
pub mod design;
pub mod discretize;
pub mod glm;
pub mod grid;
pub mod io;
pub mod mcmc;
pub(crate) mod optim;
pub mod pool;
pub mod seeds;
pub mod simulate;
pub mod spline;
pub mod track;

pub use ctcrw::{
    draw_path, fit_ctcrw, fit_ctcrw_with, kalman_loglik, ou_transition, smooth_track, CtcrwFit,
    CtcrwParams, FitOptions, ImputedPath,
};
pub use design::{
    build_design, build_design_with, conspecific_direction, directional_value, CovariateKind,
    CovariateSpec, DesignData, DesignOptions,
};
pub use discretize::{discretize, discretize_polyline, DiscretePath, TransitionRecord};
pub use glm::{
    cv_lasso, cv_lasso_with, fit_irls, fit_lasso, gamma_max, lasso_kkt_residual, lasso_path,
    poisson_loglik, CvCurve, CvOptions, GlmFit, LassoFit, SelectionRule,
};
pub use grid::{CellId, RasterGrid, UnitDirection};
pub use mcmc::{
    batch_means_se, composition_sample, sample_beta, ChainSummary, CompositionConfig, McmcChain,
    Prior,
};
pub use pool::{pool, pool_with_correction, stack_designs, PooledFit, PooledReport};
pub use simulate::{
    cell_center_trace, recovery_study, simulate_ctds, thin_to_track, RecoveryEstimator,
    RecoveryProtocol, RecoveryStudy, SimConfig,
};
pub use spline::SplineConfig;
pub use track::Track;
