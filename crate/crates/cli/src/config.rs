//! Declarative run configuration (TOML) and its mapping onto library types.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ctds::io::{grid_from_rasters, read_esri_ascii, read_imputed_path_csv};
use ctds::{CovariateKind, CovariateSpec, RasterGrid, SplineConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 keeps the rayon default. The CTDS_THREADS
    /// environment variable overrides a missing value.
    #[serde(default)]
    pub threads: usize,
    /// For runs without rasters, the analysis grid is sized to the track's
    /// bounding box plus this many cells of margin on every side (imputed
    /// paths overshoot the fixes).
    #[serde(default = "default_margin")]
    pub grid_margin_cells: usize,
    #[serde(default)]
    pub telemetry: Option<TelemetryConfig>,
    #[serde(default)]
    pub imputation: ImputationConfig,
    #[serde(default)]
    pub rasters: Vec<RasterEntry>,
    #[serde(default)]
    pub spline: SplineSection,
    #[serde(default)]
    pub covariates: Vec<CovariateEntry>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub bayes: BayesSection,
    #[serde(default)]
    pub simulation: Option<SimulationSection>,
    #[serde(default)]
    pub recovery: RecoverySection,
}

fn default_seed() -> u64 {
    1
}

fn default_margin() -> usize {
    20
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryConfig {
    pub file: PathBuf,
    /// Track id to analyze; defaults to the first track in the file.
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationConfig {
    /// Number of imputations K.
    pub k: usize,
    /// Fine-grid step in seconds.
    pub delta: f64,
    /// Fixed CTCRW parameters; when all three are present the fit is
    /// skipped.
    pub gamma_ou: Option<f64>,
    pub sigma_ou: Option<f64>,
    pub obs_sd: Option<f64>,
    pub estimate_mu: bool,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        ImputationConfig {
            k: 10,
            delta: 300.0,
            gamma_ou: None,
            sigma_ou: None,
            obs_sd: None,
            estimate_mu: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterEntry {
    pub name: String,
    pub file: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplineSection {
    pub period: f64,
    pub knot_spacing: f64,
    pub degree: usize,
}

impl Default for SplineSection {
    fn default() -> Self {
        SplineSection {
            period: 86_400.0,
            knot_spacing: 21_600.0,
            degree: 3,
        }
    }
}

impl SplineSection {
    pub fn to_spline(&self) -> Result<SplineConfig> {
        Ok(SplineConfig::new(self.period, self.knot_spacing, self.degree)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateEntry {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub layer: Option<String>,
    #[serde(default)]
    pub vx_layer: Option<String>,
    #[serde(default)]
    pub vy_layer: Option<String>,
    /// Imputed-path CSV of the companion animal (conspecific kind).
    #[serde(default)]
    pub companion_path: Option<PathBuf>,
    #[serde(default)]
    pub time_varying: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// mle | lasso-cv | stacked-lasso | bayes | bayes-lasso
    pub estimator: String,
    pub n_folds: usize,
    /// Explicit lasso penalty (bayes-lasso); otherwise read `gamma_from`.
    pub gamma: Option<f64>,
    /// JSON output of a previous `ctds cv` run.
    pub gamma_from: Option<PathBuf>,
    pub use_censored_tail: bool,
    /// cv rule: "1se" | "min"
    pub cv_rule: String,
    /// Write the first imputation's design rows to design_0.csv.
    pub dump_design: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            estimator: "mle".to_string(),
            n_folds: 10,
            gamma: None,
            gamma_from: None,
            use_censored_tail: false,
            cv_rule: "1se".to_string(),
            dump_design: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesSection {
    pub n_iter: usize,
    pub n_burn: usize,
    pub prior_variance: f64,
}

impl Default for BayesSection {
    fn default() -> Self {
        // Burn-in defaults to a quarter of the run.
        BayesSection {
            n_iter: 20_000,
            n_burn: 5_000,
            prior_variance: 100.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Grid geometry used when no rasters are configured.
    #[serde(default)]
    pub n_rows: Option<usize>,
    #[serde(default)]
    pub n_cols: Option<usize>,
    #[serde(default)]
    pub cell_size: Option<f64>,
    #[serde(default)]
    pub origin_x: Option<f64>,
    #[serde(default)]
    pub origin_y: Option<f64>,
    pub start_row: usize,
    pub start_col: usize,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    pub thin_interval: f64,
    #[serde(default)]
    pub jitter_sd: f64,
    /// True coefficient per covariate name: a number, or an array in the
    /// spline-expanded space for time-varying covariates.
    pub truth: BTreeMap<String, TruthValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruthValue {
    Scalar(f64),
    Expanded(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySection {
    pub n_replicates: usize,
    /// imputed | oracle
    pub estimator: String,
    pub k_imputations: usize,
}

impl Default for RecoverySection {
    fn default() -> Self {
        RecoverySection {
            n_replicates: 100,
            estimator: "imputed".to_string(),
            k_imputations: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file '{}'", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config file '{}'", path.display()))?;
        Ok(config)
    }

    /// Loads the configured rasters into one grid. With no rasters, builds
    /// a bare grid from the simulation geometry.
    pub fn load_grid(&self) -> Result<RasterGrid> {
        if self.rasters.is_empty() {
            let sim = self.simulation.as_ref().context(
                "no rasters configured and no [simulation] geometry to build a grid from",
            )?;
            let grid = RasterGrid::new(
                sim.n_rows.unwrap_or(50),
                sim.n_cols.unwrap_or(50),
                sim.cell_size.unwrap_or(100.0),
                sim.origin_x.unwrap_or(0.0),
                sim.origin_y.unwrap_or(0.0),
            )?;
            return Ok(grid);
        }
        self.load_raster_grid()
    }

    /// Grid for analysis commands: the rasters when configured, otherwise a
    /// bare grid covering the track with `grid_margin_cells` of slack.
    pub fn analysis_grid(&self, track: &ctds::Track) -> Result<RasterGrid> {
        if !self.rasters.is_empty() {
            return self.load_raster_grid();
        }
        self.grid_covering(&track.positions)
    }

    /// Bare grid covering the given points plus `grid_margin_cells`.
    pub fn grid_covering(&self, points: &[(f64, f64)]) -> Result<RasterGrid> {
        let cell_size = self
            .simulation
            .as_ref()
            .and_then(|s| s.cell_size)
            .unwrap_or(100.0);
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        let margin = self.grid_margin_cells as f64 * cell_size;
        let origin_x = ((min_x - margin) / cell_size).floor() * cell_size;
        let origin_y = ((min_y - margin) / cell_size).floor() * cell_size;
        let n_cols = (((max_x + margin) - origin_x) / cell_size).ceil() as usize + 1;
        let n_rows = (((max_y + margin) - origin_y) / cell_size).ceil() as usize + 1;
        Ok(RasterGrid::new(n_rows, n_cols, cell_size, origin_x, origin_y)?)
    }

    fn load_raster_grid(&self) -> Result<RasterGrid> {
        let mut rasters = Vec::new();
        for entry in &self.rasters {
            let raster = read_esri_ascii(&entry.file)
                .with_context(|| format!("cannot load raster '{}'", entry.file.display()))?;
            rasters.push((entry.name.clone(), raster));
        }
        Ok(grid_from_rasters(&rasters)?)
    }

    /// Materializes covariate specs (loading companion paths when needed).
    pub fn covariate_specs(&self) -> Result<Vec<CovariateSpec>> {
        let mut specs = Vec::new();
        for entry in &self.covariates {
            let kind = match entry.kind.as_str() {
                "intercept" => CovariateKind::Intercept,
                "location" => CovariateKind::Location {
                    layer: entry
                        .layer
                        .clone()
                        .with_context(|| format!("covariate '{}' needs `layer`", entry.name))?,
                },
                "directional_feature" => CovariateKind::DirectionalFeature {
                    mask_layer: entry
                        .layer
                        .clone()
                        .with_context(|| format!("covariate '{}' needs `layer`", entry.name))?,
                },
                "directional_field" => CovariateKind::DirectionalField {
                    vx_layer: entry.vx_layer.clone().with_context(|| {
                        format!("covariate '{}' needs `vx_layer`", entry.name)
                    })?,
                    vy_layer: entry.vy_layer.clone().with_context(|| {
                        format!("covariate '{}' needs `vy_layer`", entry.name)
                    })?,
                },
                "directional_conspecific" => {
                    let path = entry.companion_path.clone().with_context(|| {
                        format!("covariate '{}' needs `companion_path`", entry.name)
                    })?;
                    let companion = read_imputed_path_csv(&path).with_context(|| {
                        format!("cannot load companion path '{}'", path.display())
                    })?;
                    CovariateKind::DirectionalConspecific { companion }
                }
                "directional_persistence" => CovariateKind::DirectionalPersistence,
                other => bail!("covariate '{}': unknown kind '{other}'", entry.name),
            };
            let mut spec = CovariateSpec::new(entry.name.clone(), kind);
            if entry.time_varying {
                spec = spec.time_varying();
            }
            specs.push(spec);
        }
        if specs.is_empty() {
            bail!("no covariates configured");
        }
        Ok(specs)
    }

    /// Expands the simulation truth table into the coefficient vector in
    /// design-column order.
    pub fn truth_alpha(
        &self,
        specs: &[CovariateSpec],
        spline: SplineConfig,
    ) -> Result<Vec<f64>> {
        let sim = self.simulation.as_ref().context("missing [simulation]")?;
        let n_spl = spline.n_basis();
        let mut alpha = Vec::new();
        for spec in specs {
            let value = sim
                .truth
                .get(&spec.name)
                .with_context(|| format!("simulation truth missing covariate '{}'", spec.name))?;
            match (spec.time_varying, value) {
                (false, TruthValue::Scalar(v)) => alpha.push(*v),
                (true, TruthValue::Expanded(vs)) if vs.len() == n_spl => {
                    alpha.extend_from_slice(vs)
                }
                (true, TruthValue::Scalar(v)) => alpha.extend(std::iter::repeat(*v).take(n_spl)),
                _ => bail!(
                    "truth for '{}' must be {} values (time_varying = {})",
                    spec.name,
                    if spec.time_varying { n_spl } else { 1 },
                    spec.time_varying
                ),
            }
        }
        Ok(alpha)
    }
}
