//! The five commands: simulate, train, eval, tau, uncertainty. Each takes a
//! resolved configuration, writes its artifacts into an output directory,
//! prints a short summary, and returns a structured report for callers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use kflow::dynamics::{self, exact, TrajectoryRecord};
use kflow::embedding::{self, DelayDataset};
use kflow::kernels::{KernelSpec, Mode, Primitive, PrimitiveKind};
use kflow::regress::{self, SurrogateModel};
use kflow::train::{self, TrainOutcome};

use crate::config::{ConfigError, ExperimentConfig, IcSpec, SystemConfig};

/// Generates a state series of `steps` applications (steps + 1 states). The
/// doubling map with a fractional initial condition iterates exactly in
/// fixed-point arithmetic; float orbits of it are also allowed and decay to
/// zero, which is the honest float behavior.
pub fn generate_series(
    system: &SystemConfig,
    ic: &IcSpec,
    steps: usize,
) -> anyhow::Result<TrajectoryRecord> {
    let scalarize = |vals: Vec<f64>, origin: String| {
        TrajectoryRecord::new(vals.into_iter().map(|v| vec![v]).collect(), 1.0, origin)
    };
    match (system, ic) {
        (SystemConfig::Bernoulli, IcSpec::PiFraction { num, den }) => Ok(scalarize(
            exact::bernoulli_orbit_pi(*num, *den, steps),
            format!("bernoulli exact from pi*{num}/{den}"),
        )),
        (SystemConfig::Bernoulli, IcSpec::Rational { num, den }) => Ok(scalarize(
            exact::bernoulli_orbit_rational(*num, *den, steps),
            format!("bernoulli exact from {num}/{den}"),
        )),
        (sys, IcSpec::Float { values }) => {
            Ok(dynamics::simulate(&sys.to_system(), values, steps)?)
        }
        (sys, IcSpec::PiFraction { num, den }) => {
            let x0 = std::f64::consts::PI * (*num as f64) / (*den as f64);
            Ok(dynamics::simulate(&sys.to_system(), &[x0], steps)?)
        }
        (sys, IcSpec::Rational { num, den }) => {
            let x0 = *num as f64 / *den as f64;
            Ok(dynamics::simulate(&sys.to_system(), &[x0], steps)?)
        }
    }
}

/// Embeds a raw series according to the config: delay windows over the
/// observed components, targets over the configured next-state components.
pub fn embed_series(
    cfg: &ExperimentConfig,
    series: &TrajectoryRecord,
) -> anyhow::Result<DelayDataset> {
    let targets = cfg.targets();
    let full = embedding::delay_embed(series, cfg.data.tau, &targets)?;
    let observed = cfg.observed();
    let all: Vec<usize> = (0..cfg.system.dim()).collect();
    if observed == all {
        Ok(full)
    } else {
        Ok(embedding::project_inputs(&full, &observed)?)
    }
}

/// Training series plus its embedded dataset.
pub fn build_train_dataset(
    cfg: &ExperimentConfig,
) -> anyhow::Result<(TrajectoryRecord, DelayDataset)> {
    let series = generate_series(&cfg.system, &cfg.data.initial, cfg.data.train_steps)?;
    let ds = embed_series(cfg, &series)?;
    Ok((series, ds))
}

/// One kernel per target component, all starting from the configured family.
pub fn kernel_list(cfg: &ExperimentConfig, n_targets: usize) -> anyhow::Result<Vec<KernelSpec>> {
    let spec = cfg.kernel.spec()?;
    Ok(vec![spec; n_targets])
}

/// The additive constant-plus-Gaussian kernel used for alignment energies.
pub fn default_base_kernel() -> KernelSpec {
    KernelSpec::new(
        Mode::Raw,
        vec![
            Primitive::new(PrimitiveKind::Constant),
            Primitive::new(PrimitiveKind::Gaussian),
        ],
        vec![1.0, 1.0, 1.0],
    )
    .expect("base kernel arity")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("write {}", path.display()))?;
    Ok(path)
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Medians of the recorded losses over the first and last tenth of the
/// iterations (at least one iteration each).
fn loss_trend(outcome: &TrainOutcome) -> Option<(f64, f64)> {
    let losses: Vec<f64> = outcome.history.iter().filter_map(|h| h.loss).collect();
    if losses.is_empty() {
        return None;
    }
    let k = (losses.len() / 10).max(1);
    let mut first: Vec<f64> = losses[..k].to_vec();
    let mut last: Vec<f64> = losses[losses.len() - k..].to_vec();
    Some((median(&mut first), median(&mut last)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateReport {
    pub system: String,
    pub n_states: usize,
    pub dt: f64,
    pub trajectory_path: PathBuf,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<SimulateReport> {
    let series = generate_series(&cfg.system, &cfg.data.initial, cfg.data.train_steps)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let path = write_file(out, "trajectory.csv", &series.to_csv())?;
    let report = SimulateReport {
        system: cfg.system.name().to_string(),
        n_states: series.len(),
        dt: series.dt,
        trajectory_path: path,
    };
    println!(
        "system={} n={} dt={}",
        report.system, report.n_states, report.dt
    );
    println!("wrote {}", report.trajectory_path.display());
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalEntry {
    pub ic: String,
    pub trained_rmse: Vec<f64>,
    /// One-step RMSE of the untrained (initial-parameter) interpolant fitted
    /// on the same rows; None when that fit fails.
    pub baseline_rmse: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: Option<f64>,
    pub loss_median_first: Option<f64>,
    pub loss_median_last: Option<f64>,
    pub skipped: usize,
    pub fit_rows: usize,
    pub theta: Vec<Vec<f64>>,
    pub evals: Vec<EvalEntry>,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<TrainReport> {
    let (_series, ds) = build_train_dataset(cfg)?;
    let kernels0 = kernel_list(cfg, ds.target_count())?;
    let tc = cfg.train.to_train_config()?;
    let outcome = train::kernel_flow(&ds, &kernels0, &tc)?;

    let fit_ds = match (&outcome.last_batch, cfg.train.fit_on_last_batch) {
        (Some(idx), true) => embedding::select_rows(&ds, idx),
        _ => ds.clone(),
    };
    for (i, k) in outcome.kernels.iter().enumerate() {
        log::info!("trained theta[{i}] = {:?}", k.theta);
    }
    log::info!("fitting final model on {} rows", fit_ds.len());
    let model = regress::fit(&fit_ds, &outcome.kernels, tc.nugget)?;
    let baseline = regress::fit(&fit_ds, &kernels0, tc.nugget).ok();

    let mut evals = Vec::new();
    for ic in &cfg.data.test_initial {
        let test = generate_series(&cfg.system, ic, cfg.data.test_steps)?;
        let trained_rmse = model.one_step_errors(&test)?;
        let baseline_rmse = baseline
            .as_ref()
            .and_then(|b| b.one_step_errors(&test).ok());
        evals.push(EvalEntry {
            ic: ic.label(),
            trained_rmse,
            baseline_rmse,
        });
    }

    let trend = loss_trend(&outcome);
    let report = TrainReport {
        final_loss: outcome.history.iter().rev().find_map(|h| h.loss),
        loss_median_first: trend.map(|t| t.0),
        loss_median_last: trend.map(|t| t.1),
        skipped: outcome.skipped,
        fit_rows: fit_ds.len(),
        theta: outcome.kernels.iter().map(|k| k.theta.clone()).collect(),
        evals,
    };

    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    write_file(out, "model.json", &model.to_json())?;
    write_file(out, "history.csv", &train::history_to_csv(&outcome.history))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, "report.json", &json)?;

    match report.final_loss {
        Some(l) => println!(
            "final loss {l} after {} iterations ({} skipped)",
            cfg.train.iterations, report.skipped
        ),
        None => println!(
            "no recorded loss ({} iterations, {} skipped)",
            cfg.train.iterations, report.skipped
        ),
    }
    for (i, th) in report.theta.iter().enumerate() {
        println!("theta[{i}] = {}", fmt_vec(th));
    }
    for e in &report.evals {
        match &e.baseline_rmse {
            Some(b) => println!(
                "test {}: rmse {} (untrained {})",
                e.ic,
                fmt_vec(&e.trained_rmse),
                fmt_vec(b)
            ),
            None => println!("test {}: rmse {}", e.ic, fmt_vec(&e.trained_rmse)),
        }
    }
    println!("wrote {}", out.join("model.json").display());
    Ok(report)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<RmseEntry>,
    pub rollout_path: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RmseEntry {
    pub ic: String,
    pub rmse: Vec<f64>,
}

pub fn load_model(path: &Path) -> anyhow::Result<SurrogateModel> {
    let text =
        fs::read_to_string(path).map_err(|e| ConfigError(format!("read {}: {e}", path.display())))?;
    Ok(SurrogateModel::from_json(&text)?)
}

/// Embeds an evaluation series exactly the way the model expects its inputs.
fn embed_for_model(
    model: &SurrogateModel,
    series: &TrajectoryRecord,
) -> anyhow::Result<DelayDataset> {
    let full = embedding::delay_embed(series, model.tau, &model.targets)?;
    let all: Vec<usize> = (0..model.source_dim).collect();
    if model.input_components == all {
        Ok(full)
    } else {
        Ok(embedding::project_inputs(&full, &model.input_components)?)
    }
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    model_path: &Path,
    rollout_steps: Option<usize>,
    out: &Path,
) -> anyhow::Result<EvalReport> {
    let model = load_model(model_path)?;
    if cfg.data.test_initial.is_empty() {
        return Err(ConfigError("eval needs at least one data.test_initial".into()).into());
    }
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;

    let mut entries = Vec::new();
    let mut first_series: Option<TrajectoryRecord> = None;
    for ic in &cfg.data.test_initial {
        let test = generate_series(&cfg.system, ic, cfg.data.test_steps)?;
        let rmse = model.one_step_errors(&test)?;
        println!("test {}: rmse {}", ic.label(), fmt_vec(&rmse));
        entries.push(RmseEntry {
            ic: ic.label(),
            rmse,
        });
        if first_series.is_none() {
            first_series = Some(test);
        }
    }
    let test = first_series.expect("at least one test series");

    // Teacher-forced differences along the first evaluation series: each
    // prediction uses the true delay window.
    let ds = embed_for_model(&model, &test)?;
    let mut diff = String::from("t");
    for &t in &model.targets {
        diff.push_str(&format!(",d{t}"));
    }
    diff.push('\n');
    let mut xrow = vec![0.0; ds.input_width()];
    for r in 0..ds.len() {
        for c in 0..ds.input_width() {
            xrow[c] = ds.x[(r, c)];
        }
        let pred = model.predict_mean(&xrow)?;
        diff.push_str(&format!("{}", (r + model.tau) as f64 * test.dt));
        for (j, p) in pred.iter().enumerate() {
            diff.push_str(&format!(",{}", p - ds.y[(r, j)]));
        }
        diff.push('\n');
    }
    write_file(out, "difference.csv", &diff)?;

    let rollout_path = match rollout_steps {
        Some(n) => {
            let observed = &model.input_components;
            let seed: Vec<Vec<f64>> = test.states[..model.tau]
                .iter()
                .map(|s| observed.iter().map(|&c| s[c]).collect())
                .collect();
            let roll = model.rollout(&seed, n)?;
            Some(write_file(out, "rollout.csv", &roll.to_csv())?)
        }
        None => None,
    };

    let report = EvalReport {
        entries,
        rollout_path,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, "eval.json", &json)?;
    println!("wrote {}", out.join("eval.json").display());
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TauReport {
    pub recommended: usize,
    pub energies: Vec<f64>,
    pub sweep: Vec<(usize, Option<f64>)>,
}

/// The component a scalar sweep reads: the single observed component, or
/// component 0 of a scalar system.
fn scalar_component(cfg: &ExperimentConfig) -> anyhow::Result<usize> {
    match &cfg.data.observe {
        Some(obs) if obs.len() == 1 => Ok(obs[0]),
        None if cfg.system.dim() == 1 => Ok(0),
        _ => Err(ConfigError(
            "tau selection needs a scalar series: set data.observe to one component".into(),
        )
        .into()),
    }
}

fn scalarize(series: &TrajectoryRecord, c: usize) -> TrajectoryRecord {
    TrajectoryRecord::new(
        series.states.iter().map(|s| vec![s[c]]).collect(),
        series.dt,
        format!("{} component {c}", series.origin),
    )
}

pub fn cmd_tau(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<TauReport> {
    let c = scalar_component(cfg)?;
    if cfg.data.test_initial.is_empty() {
        return Err(ConfigError("tau sweep needs at least one data.test_initial".into()).into());
    }
    let train_series = scalarize(
        &generate_series(&cfg.system, &cfg.data.initial, cfg.data.train_steps)?,
        c,
    );
    let eval_series = scalarize(
        &generate_series(&cfg.system, &cfg.data.test_initial[0], cfg.data.test_steps)?,
        c,
    );

    let tau_max = cfg.tau_sweep.tau_max;
    let values = train_series.component(0);
    let profile = embedding::kmd_energies(
        &values,
        tau_max,
        &default_base_kernel(),
        cfg.tau_sweep.kmd_nugget,
    )?;
    let recommended = embedding::select_tau_kmd(&profile);

    let template = cfg.kernel.spec()?;
    let tc = cfg.train.to_train_config()?;
    let range: Vec<usize> = (0..=tau_max).collect();
    let sweep = embedding::rmse_tau_sweep(&train_series, &range, &template, &tc, &eval_series);
    if sweep.iter().all(|(_, r)| r.is_none()) {
        return Err(anyhow::anyhow!("every tau sweep entry failed"));
    }

    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    write_file(out, "energies.csv", &embedding::energies_to_csv(&profile))?;
    write_file(out, "sweep.csv", &embedding::sweep_to_csv(&sweep))?;

    println!("recommended tau = {recommended} (energy argmax)");
    for (tau, e) in profile.energies.iter().enumerate() {
        let rmse = sweep
            .iter()
            .find(|(t, _)| *t == tau)
            .and_then(|(_, r)| *r)
            .map_or("-".to_string(), |r| format!("{r}"));
        println!("tau={tau} energy={e} rmse={rmse}");
    }
    Ok(TauReport {
        recommended,
        energies: profile.energies.clone(),
        sweep,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub rows: usize,
    pub max_delta: f64,
    pub csv_path: PathBuf,
}

pub fn cmd_uncertainty(
    cfg: &ExperimentConfig,
    model_path: &Path,
    out: &Path,
) -> anyhow::Result<UncertaintyReport> {
    let model = load_model(model_path)?;
    let ic = cfg
        .data
        .test_initial
        .first()
        .ok_or_else(|| ConfigError("uncertainty needs a data.test_initial entry".into()))?;
    if cfg.data.test_steps < model.tau {
        return Err(ConfigError(format!(
            "test series of {} steps is shorter than the model window {}",
            cfg.data.test_steps, model.tau
        ))
        .into());
    }
    let test = generate_series(&cfg.system, ic, cfg.data.test_steps)?;
    let ds = embed_for_model(&model, &test)?;

    // Interpolant norms over training plus evaluation points.
    let n_train = model.x.nrows();
    let n_test = ds.len();
    let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        DMatrix::from_fn(n_train + n_test, a.ncols(), |r, col| {
            if r < n_train {
                a[(r, col)]
            } else {
                b[(r - n_train, col)]
            }
        })
    };
    let reference = DelayDataset {
        x: stack(&model.x, &ds.x),
        y: stack(&model.y, &ds.y),
        tau: model.tau,
        source_dim: model.source_dim,
        targets: model.targets.clone(),
        input_components: model.input_components.clone(),
    };
    let norms = model.interval_norms(&reference)?;

    let mut csv = String::from("t");
    for &t in &model.targets {
        csv.push_str(&format!(",pred{t},delta{t}"));
    }
    csv.push('\n');
    let mut max_delta: f64 = 0.0;
    let mut xrow = vec![0.0; ds.input_width()];
    for r in 0..n_test {
        for c in 0..ds.input_width() {
            xrow[c] = ds.x[(r, c)];
        }
        let pred = model.predict_mean(&xrow)?;
        let delta = model.error_interval_with_norms(&xrow, &norms)?;
        csv.push_str(&format!("{}", (r + model.tau) as f64 * test.dt));
        for (p, d) in pred.iter().zip(&delta) {
            csv.push_str(&format!(",{p},{d}"));
            max_delta = max_delta.max(*d);
        }
        csv.push('\n');
    }

    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let csv_path = write_file(out, "uncertainty.csv", &csv)?;
    println!("wrote {} ({n_test} rows, max delta {max_delta})", csv_path.display());
    Ok(UncertaintyReport {
        rows: n_test,
        max_delta,
        csv_path,
    })
}
