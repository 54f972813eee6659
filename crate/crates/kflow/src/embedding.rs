//! Delay embedding of time series into supervised datasets, and embedding
//! delay selection via kernel alignment energies and an RMSE sweep.

use crate::dynamics::TrajectoryRecord;
use crate::error::{KflowError, Result};
use crate::kernels::{self, KernelSpec};
use crate::regress;
use crate::train::{self, TrainConfig};
use nalgebra::{DMatrix, DVector};

/// Supervised one-step dataset: row k of `x` stacks `tau` consecutive states
/// newest first, row k of `y` holds the selected components of the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDataset {
    /// N x (len(input_components) * tau) delay vectors.
    pub x: DMatrix<f64>,
    /// N x len(targets) targets.
    pub y: DMatrix<f64>,
    /// Window length: number of consecutive states per delay vector.
    pub tau: usize,
    /// Dimension of the source series.
    pub source_dim: usize,
    /// Component indices predicted by `y`.
    pub targets: Vec<usize>,
    /// Component indices retained inside each window state.
    pub input_components: Vec<usize>,
}

impl DelayDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_width(&self) -> usize {
        self.x.ncols()
    }

    pub fn target_count(&self) -> usize {
        self.y.ncols()
    }
}

/// Builds the delay dataset with window length `tau`: for a series of length
/// n there are N = n - tau rows, X_k = (x_{k+tau-1}, ..., x_k) newest first
/// and Y_k = x_{k+tau} restricted to `targets`.
pub fn delay_embed(
    series: &TrajectoryRecord,
    tau: usize,
    targets: &[usize],
) -> Result<DelayDataset> {
    let n = series.len();
    let d = series.dim();
    if tau == 0 {
        return Err(KflowError::DimensionMismatch("window length tau must be >= 1".into()));
    }
    if n <= tau {
        return Err(KflowError::SeriesTooShort { len: n, need: tau + 1 });
    }
    if targets.is_empty() {
        return Err(KflowError::DimensionMismatch("empty target component list".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= d) {
        return Err(KflowError::DimensionMismatch(format!(
            "target component {bad} out of range for dimension {d}"
        )));
    }
    let rows = n - tau;
    let mut x = DMatrix::zeros(rows, d * tau);
    let mut y = DMatrix::zeros(rows, targets.len());
    for k in 0..rows {
        for j in 0..tau {
            let state = &series.states[k + tau - 1 - j];
            for c in 0..d {
                x[(k, j * d + c)] = state[c];
            }
        }
        for (m, &t) in targets.iter().enumerate() {
            y[(k, m)] = series.states[k + tau][t];
        }
    }
    Ok(DelayDataset {
        x,
        y,
        tau,
        source_dim: d,
        targets: targets.to_vec(),
        input_components: (0..d).collect(),
    })
}

/// Restricts the observed components inside every window state, e.g. to learn
/// a full-state map from partial observations.
pub fn project_inputs(dataset: &DelayDataset, components: &[usize]) -> Result<DelayDataset> {
    let d = dataset.input_components.len();
    if let Some(&bad) = components.iter().find(|&&c| c >= dataset.source_dim) {
        return Err(KflowError::DimensionMismatch(format!(
            "input component {bad} out of range for dimension {}",
            dataset.source_dim
        )));
    }
    let mut cols = Vec::with_capacity(components.len() * dataset.tau);
    for j in 0..dataset.tau {
        for &c in components {
            let pos = dataset
                .input_components
                .iter()
                .position(|&k| k == c)
                .ok_or_else(|| {
                    KflowError::DimensionMismatch(format!(
                        "input component {c} not present in dataset"
                    ))
                })?;
            cols.push(j * d + pos);
        }
    }
    let mut x = DMatrix::zeros(dataset.len(), cols.len());
    for (new_c, &old_c) in cols.iter().enumerate() {
        for r in 0..dataset.len() {
            x[(r, new_c)] = dataset.x[(r, old_c)];
        }
    }
    Ok(DelayDataset {
        x,
        y: dataset.y.clone(),
        tau: dataset.tau,
        source_dim: dataset.source_dim,
        targets: dataset.targets.clone(),
        input_components: components.to_vec(),
    })
}

/// Keeps the most recent i+1 entries of a newest-first window.
pub fn truncate_window(window: &[f64], i: usize) -> &[f64] {
    &window[..(i + 1).min(window.len())]
}

/// Dataset restricted to the given rows (in the given order).
pub fn select_rows(dataset: &DelayDataset, idx: &[usize]) -> DelayDataset {
    DelayDataset {
        x: dataset.x.select_rows(idx.iter()),
        y: dataset.y.select_rows(idx.iter()),
        tau: dataset.tau,
        source_dim: dataset.source_dim,
        targets: dataset.targets.clone(),
        input_components: dataset.input_components.clone(),
    }
}

/// Per-delay alignment energies of a scalar series under an additive kernel.
#[derive(Debug, Clone)]
pub struct KmdEnergyProfile {
    pub energies: Vec<f64>,
    pub tau_max: usize,
    pub base_kernel: KernelSpec,
    /// a^T (K + lambda I) a on the summed Gram, which approximates the total
    /// energy v^T (K + lambda I)^{-1} v; the per-delay energies sum to it.
    pub total_energy: f64,
}

/// Decomposes the one-step prediction energy of a scalar series over window
/// truncation depths. Windows W(t) = [v(t), ..., v(t - tau_max)] with targets
/// v(t+1); K_i is the Gram of the kernel applied to the most recent i+1
/// window entries, K = sum_i K_i, and E_i = a^T K_i a + shared-nugget share
/// with a = (K + lambda I)^{-1} v, so that sum_i E_i = a^T (K + lambda I) a.
pub fn kmd_energies(
    series: &[f64],
    tau_max: usize,
    base_kernel: &KernelSpec,
    nugget: Option<f64>,
) -> Result<KmdEnergyProfile> {
    let n = series.len();
    if n < tau_max + 2 {
        return Err(KflowError::SeriesTooShort { len: n, need: tau_max + 2 });
    }
    let width = tau_max + 1;
    let rows = n - 1 - tau_max;
    let mut windows = DMatrix::zeros(rows, width);
    let mut targets = DVector::zeros(rows);
    for (r, t) in (tau_max..n - 1).enumerate() {
        for j in 0..width {
            windows[(r, j)] = series[t - j];
        }
        targets[r] = series[t + 1];
    }

    let theta = &base_kernel.theta;
    let mut partial: Vec<DMatrix<f64>> = Vec::with_capacity(width);
    for i in 0..width {
        let sub = windows.columns(0, i + 1).into_owned();
        partial.push(kernels::gram(base_kernel, theta, &sub)?);
    }
    let mut total = DMatrix::zeros(rows, rows);
    for k in &partial {
        total += k;
    }

    let y = DMatrix::from_column_slice(rows, 1, targets.as_slice());
    let solve = regress::solve_gram(&total, &y, nugget)?;
    let mut a = solve.coeffs.column(0).into_owned();
    // One iterative-refinement pass pulls a toward the exact regularized
    // solution, so the quadratic form below tracks the true total energy.
    let reg = &total + DMatrix::identity(rows, rows) * solve.nugget;
    let resid = &targets - &reg * &a;
    a += solve.factor.solve_vec(&resid);

    // The quad-form terms a_i K_ij a_j can exceed the result by many orders
    // of magnitude, so compensated accumulation keeps the energy-sum
    // identity tight even for near-singular Grams.
    let share = solve.nugget / width as f64;
    let sq = a.dot(&a);
    let mut energies = Vec::with_capacity(width);
    let mut whole = Neumaier::default();
    for k in &partial {
        let mut acc = Neumaier::default();
        accumulate_quad(&mut acc, k, &a);
        accumulate_quad(&mut whole, k, &a);
        energies.push(acc.value() + share * sq);
    }
    // Same terms accumulated in one sweep: the per-delay energies must
    // reproduce this total up to floating-point association.
    let total_energy = whole.value() + solve.nugget * sq;
    Ok(KmdEnergyProfile {
        energies,
        tau_max,
        base_kernel: base_kernel.clone(),
        total_energy,
    })
}

/// Neumaier-compensated accumulator.
#[derive(Default)]
struct Neumaier {
    s: f64,
    c: f64,
}

impl Neumaier {
    fn add(&mut self, term: f64) {
        let t = self.s + term;
        if self.s.abs() >= term.abs() {
            self.c += (self.s - t) + term;
        } else {
            self.c += (term - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// Adds every term of the quadratic form a^T K a to the accumulator.
fn accumulate_quad(acc: &mut Neumaier, k: &DMatrix<f64>, a: &DVector<f64>) {
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            acc.add(a[i] * k[(i, j)] * a[j]);
        }
    }
}

/// Smallest index attaining the maximal energy.
pub fn select_tau_kmd(profile: &KmdEnergyProfile) -> usize {
    let mut best = 0;
    for (i, &e) in profile.energies.iter().enumerate() {
        if e > profile.energies[best] {
            best = i;
        }
    }
    best
}

/// For each delay tau in `tau_range` (window length tau + 1): embed the
/// scalar series, train the kernel, fit, and report one-step RMSE on the
/// evaluation series. Failures leave a missing entry instead of aborting.
pub fn rmse_tau_sweep(
    series: &TrajectoryRecord,
    tau_range: &[usize],
    kernel_template: &KernelSpec,
    train_config: &TrainConfig,
    eval_series: &TrajectoryRecord,
) -> Vec<(usize, Option<f64>)> {
    let mut out = Vec::with_capacity(tau_range.len());
    for &tau in tau_range {
        let r = sweep_entry(series, tau, kernel_template, train_config, eval_series);
        match r {
            Ok(rmse) => out.push((tau, Some(rmse))),
            Err(e) => {
                log::warn!("tau sweep entry {tau} failed: {e}");
                out.push((tau, None));
            }
        }
    }
    out
}

fn sweep_entry(
    series: &TrajectoryRecord,
    tau: usize,
    kernel_template: &KernelSpec,
    train_config: &TrainConfig,
    eval_series: &TrajectoryRecord,
) -> Result<f64> {
    let ds = delay_embed(series, tau + 1, &[0])?;
    let outcome = train::kernel_flow(&ds, &[kernel_template.clone()], train_config)?;
    let model = regress::fit(&ds, &outcome.kernels, train_config.nugget)?;
    let errs = model.one_step_errors(eval_series)?;
    Ok(errs[0])
}

/// CSV export `tau,energy`.
pub fn energies_to_csv(profile: &KmdEnergyProfile) -> String {
    let mut out = String::from("tau,energy\n");
    for (i, e) in profile.energies.iter().enumerate() {
        out.push_str(&format!("{i},{e}\n"));
    }
    out
}

/// CSV export `tau,rmse`; missing entries leave the rmse field empty.
pub fn sweep_to_csv(curve: &[(usize, Option<f64>)]) -> String {
    let mut out = String::from("tau,rmse\n");
    for (tau, rmse) in curve {
        match rmse {
            Some(v) => out.push_str(&format!("{tau},{v}\n")),
            None => out.push_str(&format!("{tau},\n")),
        }
    }
    out
}
