//! Subcommand implementations over the library pipeline.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ctds::glm::{CvCurve, SelectionRule};
use ctds::io;
use ctds::mcmc::{ChainSummary, CompositionConfig};
use ctds::pool::CoefficientRow;
use ctds::seeds::child_seed;
use ctds::{
    build_design_with, cv_lasso_with, discretize, draw_path, fit_ctcrw_with, fit_irls, pool,
    simulate_ctds, stack_designs, thin_to_track, CovariateSpec, CtcrwParams, CvOptions,
    DesignData, DesignOptions, FitOptions, GlmFit, Prior, RasterGrid, RecoveryEstimator,
    RecoveryProtocol, SimConfig, SplineConfig, Track,
};

use crate::config::{RunConfig, TruthValue};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path)
        .with_context(|| format!("cannot create '{}'", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn ensure_output_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.output_dir).with_context(|| {
        format!("cannot create output dir '{}'", config.output_dir.display())
    })
}

fn load_track(config: &RunConfig) -> Result<Track> {
    let telemetry = config
        .telemetry
        .as_ref()
        .context("config has no [telemetry] section")?;
    let tracks = io::read_telemetry_csv(&telemetry.file)
        .with_context(|| format!("cannot load telemetry '{}'", telemetry.file.display()))?;
    match &telemetry.id {
        Some(id) => tracks
            .into_iter()
            .find(|t| &t.id == id)
            .with_context(|| format!("no track with id '{id}'")),
        None => tracks
            .into_iter()
            .next()
            .context("telemetry file contains no tracks"),
    }
}

/// Fits the CTCRW model unless all parameters are pinned in the config.
fn ctcrw_params(config: &RunConfig, track: &Track) -> Result<(CtcrwParams, Option<f64>)> {
    let imp = &config.imputation;
    if let (Some(g), Some(s), Some(obs)) = (imp.gamma_ou, imp.sigma_ou, imp.obs_sd) {
        return Ok((CtcrwParams::new(g, s, obs)?, None));
    }
    let init = CtcrwParams::heuristic_init(track)?;
    let options = FitOptions {
        estimate_mu: imp.estimate_mu,
        ..FitOptions::default()
    };
    let fit = match fit_ctcrw_with(track, init, options) {
        Ok(fit) => fit,
        Err(ctds::ctcrw::CtcrwError::NonConvergence { best, .. }) => {
            eprintln!("warning: CTCRW fit did not converge; using best parameters found");
            *best
        }
        Err(e) => return Err(e.into()),
    };
    Ok((fit.params, Some(fit.loglik)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CtcrwReport {
    gamma_ou: f64,
    sigma_ou: f64,
    mu: (f64, f64),
    obs_sd: f64,
    loglik: Option<f64>,
}

pub fn cmd_impute(config: &RunConfig) -> Result<()> {
    ensure_output_dir(config)?;
    let track = load_track(config)?;
    let (params, loglik) = ctcrw_params(config, &track)?;
    write_json(
        &config.output_dir.join("ctcrw_params.json"),
        &CtcrwReport {
            gamma_ou: params.gamma_ou,
            sigma_ou: params.sigma_ou,
            mu: params.mu,
            obs_sd: params.obs_sd,
            loglik,
        },
    )?;
    for k in 0..config.imputation.k {
        let path = draw_path(
            &track,
            &params,
            config.imputation.delta,
            child_seed(config.seed, k as u64),
        )?;
        let file = config.output_dir.join(format!("imputed_{k}.csv"));
        io::write_imputed_path_csv(&file, k, &path)?;
    }
    println!(
        "wrote {} imputed paths and ctcrw_params.json to {}",
        config.imputation.k,
        config.output_dir.display()
    );
    Ok(())
}

pub fn cmd_discretize(config: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    ensure_output_dir(config)?;
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        (0..config.imputation.k)
            .map(|k| config.output_dir.join(format!("imputed_{k}.csv")))
            .collect()
    } else {
        inputs.to_vec()
    };
    let mut paths = Vec::with_capacity(inputs.len());
    for input in &inputs {
        paths.push(
            io::read_imputed_path_csv(input)
                .with_context(|| format!("cannot load imputed path '{}'", input.display()))?,
        );
    }
    // Without rasters, size the grid to cover the paths themselves.
    let grid = if config.rasters.is_empty() {
        let all: Vec<(f64, f64)> = paths.iter().flat_map(|p| p.positions.clone()).collect();
        config.grid_covering(&all)?
    } else {
        config.load_grid()?
    };
    for (input, path) in inputs.iter().zip(&paths) {
        let dp = discretize(path, &grid)?;
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("path");
        let out = config.output_dir.join(format!("{stem}_discrete.csv"));
        io::write_discrete_path_csv(&out, &dp)?;
    }
    println!("discretized {} paths", inputs.len());
    Ok(())
}

/// Imputes, discretizes, and builds one design per draw.
fn build_designs(
    config: &RunConfig,
    track: &Track,
    grid: &RasterGrid,
    specs: &[CovariateSpec],
    spline: SplineConfig,
    params: &CtcrwParams,
) -> Result<Vec<DesignData>> {
    let options = DesignOptions {
        use_censored_tail: config.fit.use_censored_tail,
    };
    let mut designs = Vec::with_capacity(config.imputation.k);
    for k in 0..config.imputation.k {
        let path = draw_path(
            track,
            params,
            config.imputation.delta,
            child_seed(config.seed, k as u64),
        )?;
        let dp = discretize(&path, grid)?;
        designs.push(build_design_with(&dp, grid, specs, spline, options)?);
    }
    if config.fit.dump_design {
        let mut w = BufWriter::new(File::create(config.output_dir.join("design_0.csv"))?);
        designs[0].write_csv(&mut w)?;
    }
    Ok(designs)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub estimator: String,
    pub k_imputations: usize,
    pub rows: Vec<FitRow>,
    pub loglik: Option<f64>,
    pub chosen_gamma: Option<f64>,
    pub cv_curve: Option<CvCurve>,
    pub ctcrw: CtcrwReport,
}

/// Coefficient-table row; uncertainty fields are absent for point-only
/// estimators (lasso).
#[derive(Debug, Serialize, Deserialize)]
pub struct FitRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub starred: Option<bool>,
}

impl From<CoefficientRow> for FitRow {
    fn from(r: CoefficientRow) -> Self {
        FitRow {
            name: r.name,
            estimate: r.estimate,
            se: Some(r.se),
            lower: Some(r.lower),
            upper: Some(r.upper),
            starred: Some(r.starred),
        }
    }
}

fn glm_rows(fit: &GlmFit) -> Vec<FitRow> {
    const Z: f64 = 1.959963984540054;
    (0..fit.beta_hat.len())
        .map(|j| {
            let se = fit.se(j);
            let lo = fit.beta_hat[j] - Z * se;
            let hi = fit.beta_hat[j] + Z * se;
            FitRow {
                name: fit.col_names[j].clone(),
                estimate: fit.beta_hat[j],
                se: Some(se),
                lower: Some(lo),
                upper: Some(hi),
                starred: Some(lo > 0.0 || hi < 0.0),
            }
        })
        .collect()
}

fn selection_rule(config: &RunConfig) -> Result<SelectionRule> {
    match config.fit.cv_rule.as_str() {
        "1se" => Ok(SelectionRule::OneStdErr),
        "min" => Ok(SelectionRule::MinDeviance),
        other => bail!("unknown cv_rule '{other}' (expected '1se' or 'min')"),
    }
}

/// Hourly varying-coefficient curves with Gaussian CI bands:
/// `covariate,hour,estimate,lower,upper`.
fn write_beta_curves(
    path: &Path,
    specs: &[CovariateSpec],
    spline: SplineConfig,
    col_groups: &[String],
    estimate: impl Fn(usize) -> f64,
    variance: Option<&dyn Fn(&[usize], &[f64]) -> f64>,
) -> Result<()> {
    const Z: f64 = 1.959963984540054;
    let mut w = BufWriter::new(File::create(path)?);
    use std::io::Write;
    writeln!(w, "covariate,hour,estimate,lower,upper")?;
    for spec in specs.iter().filter(|s| s.time_varying) {
        let cols: Vec<usize> = col_groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == spec.name)
            .map(|(j, _)| j)
            .collect();
        for hour in 0..24 {
            let t = hour as f64 * 3600.0;
            let basis = spline.basis(t);
            let value: f64 = cols
                .iter()
                .zip(&basis)
                .map(|(&j, phi)| estimate(j) * phi)
                .sum();
            match variance {
                Some(var_fn) => {
                    let v = var_fn(&cols, &basis).max(0.0);
                    let half = Z * v.sqrt();
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        spec.name,
                        hour,
                        value,
                        value - half,
                        value + half
                    )?;
                }
                None => writeln!(w, "{},{},{},,", spec.name, hour, value)?,
            }
        }
    }
    Ok(())
}

pub fn cmd_fit(config: &RunConfig) -> Result<()> {
    ensure_output_dir(config)?;
    let track = load_track(config)?;
    let grid = config.analysis_grid(&track)?;
    let specs = config.covariate_specs()?;
    let spline = config.spline.to_spline()?;
    let (params, ctcrw_loglik) = ctcrw_params(config, &track)?;
    let ctcrw_report = CtcrwReport {
        gamma_ou: params.gamma_ou,
        sigma_ou: params.sigma_ou,
        mu: params.mu,
        obs_sd: params.obs_sd,
        loglik: ctcrw_loglik,
    };
    let estimator = config.fit.estimator.as_str();
    match estimator {
        "mle" => {
            let designs = build_designs(config, &track, &grid, &specs, spline, &params)?;
            let fits: Vec<GlmFit> = designs
                .iter()
                .map(|d| fit_irls(d).map_err(anyhow::Error::from))
                .collect::<Result<_>>()?;
            let (rows, loglik) = if fits.len() == 1 {
                (glm_rows(&fits[0]), Some(fits[0].loglik))
            } else {
                let rows = pool(&fits)?
                    .report()
                    .rows
                    .into_iter()
                    .map(FitRow::from)
                    .collect();
                (rows, None)
            };
            let report = FitReport {
                estimator: estimator.to_string(),
                k_imputations: fits.len(),
                rows,
                loglik,
                chosen_gamma: None,
                cv_curve: None,
                ctcrw: ctcrw_report,
            };
            write_json(&config.output_dir.join("fit_report.json"), &report)?;
            if specs.iter().any(|s| s.time_varying) {
                // Curves from the pooled (or single) fit with delta-method
                // bands.
                let (pooled_mean, pooled_cov): (Vec<f64>, _) = if fits.len() == 1 {
                    (
                        fits[0].beta_hat.iter().copied().collect(),
                        fits[0].covariance.clone(),
                    )
                } else {
                    let p = pool(&fits)?;
                    (p.mean.iter().copied().collect(), p.covariance.clone())
                };
                let groups = designs[0].col_group.clone();
                write_beta_curves(
                    &config.output_dir.join("beta_curves.csv"),
                    &specs,
                    spline,
                    &groups,
                    |j| pooled_mean[j],
                    Some(&|cols: &[usize], basis: &[f64]| {
                        let mut v = 0.0;
                        for (a, &ja) in cols.iter().enumerate() {
                            for (b, &jb) in cols.iter().enumerate() {
                                v += basis[a] * basis[b] * pooled_cov[(ja, jb)];
                            }
                        }
                        v
                    }),
                )?;
            }
        }
        "lasso-cv" | "stacked-lasso" => {
            let designs = build_designs(config, &track, &grid, &specs, spline, &params)?;
            let design = if estimator == "lasso-cv" {
                designs.into_iter().next().unwrap()
            } else {
                stack_designs(&designs)?
            };
            let options = CvOptions {
                n_folds: config.fit.n_folds,
                gamma_grid: None,
                rule: selection_rule(config)?,
                seed: child_seed(config.seed, 0xC0FFEE),
            };
            let fit = cv_lasso_with(&design, options)?;
            let rows: Vec<FitRow> = (0..fit.beta_hat.len())
                .map(|j| FitRow {
                    name: fit.col_names[j].clone(),
                    estimate: fit.beta_hat[j],
                    se: None,
                    lower: None,
                    upper: None,
                    starred: None,
                })
                .collect();
            let report = FitReport {
                estimator: estimator.to_string(),
                k_imputations: config.imputation.k,
                rows,
                loglik: None,
                chosen_gamma: Some(fit.penalty),
                cv_curve: fit.cv_curve.clone(),
                ctcrw: ctcrw_report,
            };
            write_json(&config.output_dir.join("fit_report.json"), &report)?;
            if specs.iter().any(|s| s.time_varying) {
                write_beta_curves(
                    &config.output_dir.join("beta_curves.csv"),
                    &specs,
                    spline,
                    &design.col_group,
                    |j| fit.beta_hat[j],
                    None,
                )?;
            }
        }
        "bayes" | "bayes-lasso" => {
            return cmd_bayes(config);
        }
        other => bail!("unknown estimator '{other}'"),
    }
    println!("wrote fit_report.json to {}", config.output_dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen_gamma: f64,
    pub rule: String,
    pub curve: CvCurve,
    pub active: Vec<String>,
    pub rows: Vec<FitRow>,
}

pub fn cmd_cv(config: &RunConfig) -> Result<()> {
    ensure_output_dir(config)?;
    let track = load_track(config)?;
    let grid = config.analysis_grid(&track)?;
    let specs = config.covariate_specs()?;
    let spline = config.spline.to_spline()?;
    let (params, _) = ctcrw_params(config, &track)?;
    let designs = build_designs(config, &track, &grid, &specs, spline, &params)?;
    let design = stack_designs(&designs)?;
    let options = CvOptions {
        n_folds: config.fit.n_folds,
        gamma_grid: None,
        rule: selection_rule(config)?,
        seed: child_seed(config.seed, 0xC0FFEE),
    };
    let fit = cv_lasso_with(&design, options)?;
    let result = CvResult {
        chosen_gamma: fit.penalty,
        rule: config.fit.cv_rule.clone(),
        curve: fit.cv_curve.clone().unwrap(),
        active: fit
            .active_set
            .iter()
            .map(|&j| fit.col_names[j].clone())
            .collect(),
        rows: (0..fit.beta_hat.len())
            .map(|j| FitRow {
                name: fit.col_names[j].clone(),
                estimate: fit.beta_hat[j],
                se: None,
                lower: None,
                upper: None,
                starred: None,
            })
            .collect(),
    };
    write_json(&config.output_dir.join("cv_result.json"), &result)?;
    println!(
        "chosen gamma {} -> cv_result.json in {}",
        fit.penalty,
        config.output_dir.display()
    );
    Ok(())
}

fn bayes_gamma(config: &RunConfig) -> Result<f64> {
    if let Some(g) = config.fit.gamma {
        return Ok(g);
    }
    let from = config
        .fit
        .gamma_from
        .clone()
        .unwrap_or_else(|| config.output_dir.join("cv_result.json"));
    if !from.exists() {
        bail!(
            "bayes-lasso needs a penalty: run `ctds cv` first (looked for '{}'), \
             or set fit.gamma / fit.gamma_from in the config",
            from.display()
        );
    }
    let text = std::fs::read_to_string(&from)?;
    let result: CvResult = serde_json::from_str(&text)
        .with_context(|| format!("cannot parse cv result '{}'", from.display()))?;
    Ok(result.chosen_gamma)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BayesReport {
    pub estimator: String,
    pub k_paths: usize,
    pub n_iter: usize,
    pub n_burn: usize,
    pub gamma: Option<f64>,
    pub summary: ChainSummary,
}

pub fn cmd_bayes(config: &RunConfig) -> Result<()> {
    ensure_output_dir(config)?;
    let track = load_track(config)?;
    let grid = config.analysis_grid(&track)?;
    let specs = config.covariate_specs()?;
    let spline = config.spline.to_spline()?;
    let (params, _) = ctcrw_params(config, &track)?;

    let estimator = if config.fit.estimator.starts_with("bayes") {
        config.fit.estimator.clone()
    } else {
        "bayes".to_string()
    };
    let (prior, gamma) = if estimator == "bayes-lasso" {
        let gamma = bayes_gamma(config)?;
        (Prior::Laplace { gamma }, Some(gamma))
    } else {
        (Prior::gaussian(config.bayes.prior_variance), None)
    };

    let composition = CompositionConfig {
        grid: &grid,
        specs: &specs,
        spline,
        ctcrw: params,
        delta: config.imputation.delta,
        prior,
        design_options: DesignOptions {
            use_censored_tail: config.fit.use_censored_tail,
        },
    };
    let chain = ctds::composition_sample(
        &track,
        &composition,
        config.imputation.k,
        config.bayes.n_iter,
        config.bayes.n_burn,
        config.seed,
    )?;
    let mut w = BufWriter::new(File::create(config.output_dir.join("chain.csv"))?);
    chain.write_csv(&mut w)?;
    if specs.iter().any(|s| s.time_varying) {
        write_bayes_beta_curves(
            &config.output_dir.join("beta_curves.csv"),
            &specs,
            spline,
            &chain,
        )?;
    }
    let report = BayesReport {
        estimator,
        k_paths: config.imputation.k,
        n_iter: config.bayes.n_iter,
        n_burn: config.bayes.n_burn,
        gamma,
        summary: chain.summary(),
    };
    write_json(&config.output_dir.join("bayes_summary.json"), &report)?;
    println!(
        "wrote chain.csv and bayes_summary.json to {}",
        config.output_dir.display()
    );
    Ok(())
}

/// Posterior mean and equal-tailed 95% band of each time-varying
/// coefficient's daily curve, sampled hourly from the chain draws.
fn write_bayes_beta_curves(
    path: &Path,
    specs: &[CovariateSpec],
    spline: SplineConfig,
    chain: &ctds::McmcChain,
) -> Result<()> {
    use std::io::Write;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "covariate,hour,estimate,lower,upper")?;
    let groups: Vec<String> = {
        // Column groups repeat the covariate name per basis function.
        let mut names = Vec::new();
        for s in specs {
            let reps = if s.time_varying { spline.n_basis() } else { 1 };
            for _ in 0..reps {
                names.push(s.name.clone());
            }
        }
        names
    };
    let n = chain.n_draws();
    for spec in specs.iter().filter(|s| s.time_varying) {
        let cols: Vec<usize> = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == spec.name)
            .map(|(j, _)| j)
            .collect();
        for hour in 0..24 {
            let t = hour as f64 * 3600.0;
            let basis = spline.basis(t);
            let mut values: Vec<f64> = (0..n)
                .map(|i| {
                    cols.iter()
                        .zip(&basis)
                        .map(|(&j, phi)| chain.draws[(i, j)] * phi)
                        .sum()
                })
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean: f64 = values.iter().sum::<f64>() / n as f64;
            let q = |p: f64| values[((p * (n as f64 - 1.0)).round() as usize).min(n - 1)];
            writeln!(w, "{},{},{},{},{}", spec.name, hour, mean, q(0.025), q(0.975))?;
        }
    }
    Ok(())
}

fn sim_config(config: &RunConfig) -> Result<(SimConfig, Vec<CovariateSpec>)> {
    let sim = config
        .simulation
        .as_ref()
        .context("config has no [simulation] section")?;
    let grid = config.load_grid()?;
    let specs = config.covariate_specs()?;
    let spline = config.spline.to_spline()?;
    let alpha = config.truth_alpha(&specs, spline)?;
    let start = grid.cell_from_rowcol(sim.start_row, sim.start_col);
    Ok((
        SimConfig {
            grid,
            specs: specs.clone(),
            spline,
            alpha,
            start,
            t0: sim.t0,
            t1: sim.t1,
            thin_interval: sim.thin_interval,
            jitter_sd: sim.jitter_sd,
            seed: config.seed,
        },
        specs,
    ))
}

#[derive(Debug, Serialize)]
struct TruthRecord<'a> {
    truth: &'a std::collections::BTreeMap<String, TruthValue>,
    alpha: &'a [f64],
    col_names: Vec<String>,
    seed: u64,
}

pub fn cmd_simulate(config: &RunConfig) -> Result<()> {
    ensure_output_dir(config)?;
    let (sim, _) = sim_config(config)?;
    let dp = simulate_ctds(&sim)?;
    let track = thin_to_track(
        &dp,
        &sim.grid,
        sim.thin_interval,
        sim.jitter_sd,
        child_seed(config.seed, 0x7417),
    )?;
    io::write_telemetry_csv(&config.output_dir.join("sim_telemetry.csv"), &[track])?;
    io::write_discrete_path_csv(&config.output_dir.join("sim_discrete.csv"), &dp)?;
    let eval_names = {
        let eval =
            ctds::design::CovariateEvaluator::new(&sim.grid, &sim.specs, sim.spline)?;
        eval.col_names()
    };
    write_json(
        &config.output_dir.join("sim_truth.json"),
        &TruthRecord {
            truth: &config.simulation.as_ref().unwrap().truth,
            alpha: &sim.alpha,
            col_names: eval_names,
            seed: config.seed,
        },
    )?;
    println!(
        "simulated {} transitions -> sim_telemetry.csv, sim_discrete.csv, sim_truth.json",
        dp.n_transitions()
    );
    Ok(())
}

pub fn cmd_recovery_study(config: &RunConfig) -> Result<()> {
    ensure_output_dir(config)?;
    let (sim, _) = sim_config(config)?;
    let estimator = match config.recovery.estimator.as_str() {
        "imputed" => RecoveryEstimator::ImputedCvLasso,
        "oracle" => RecoveryEstimator::OracleCvLasso,
        other => bail!("unknown recovery estimator '{other}'"),
    };
    let protocol = RecoveryProtocol {
        sim,
        estimator,
        k_imputations: config.recovery.k_imputations,
        imputation_delta: config.imputation.delta,
        n_folds: config.fit.n_folds,
    };
    let study = ctds::recovery_study(&protocol, config.recovery.n_replicates, config.seed)?;
    let mut w = BufWriter::new(File::create(
        config.output_dir.join("recovery_summary.csv"),
    )?);
    study.write_csv(&mut w)?;
    write_json(&config.output_dir.join("recovery_summary.json"), &study)?;
    println!(
        "{} replicates ({} failures) -> recovery_summary.csv",
        study.n_replicates, study.n_failures
    );
    Ok(())
}
