//! The three trainable losses (rho, rho_MMD, rho_L) and their ingredients:
//! seeded subset sampling, the MMD estimator, and maximal-Lyapunov-exponent
//! estimation.

use crate::dynamics::{MapSystem, TrajectoryRecord};
use crate::embedding::{self, DelayDataset};
use crate::error::{KflowError, Result};
use crate::kernels::{self, KernelSpec};
use crate::regress::{self, base_nugget};
use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Nested random index pair: c-subset of size floor(Nb/2) inside the b-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSample {
    pub indices_b: Vec<usize>,
    pub indices_c: Vec<usize>,
    pub rng_seed: u64,
}

/// Uniform sampling without replacement: Nb indices from 0..N, then half of
/// them again. Deterministic per seed.
pub fn sample_batch(n: usize, nb: usize, seed: u64) -> Result<BatchSample> {
    if nb < 2 || nb > n {
        return Err(KflowError::BatchTooLarge { nb, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices_b = rand::seq::index::sample(&mut rng, n, nb).into_vec();
    let pick = rand::seq::index::sample(&mut rng, nb, nb / 2).into_vec();
    let indices_c = pick.iter().map(|&p| indices_b[p]).collect();
    Ok(BatchSample {
        indices_b,
        indices_c,
        rng_seed: seed,
    })
}

/// Positions of each c-index inside the b-index list.
pub fn subset_positions(sample: &BatchSample) -> Vec<usize> {
    sample
        .indices_c
        .iter()
        .map(|g| {
            sample
                .indices_b
                .iter()
                .position(|b| b == g)
                .expect("c-subset nested in b")
        })
        .collect()
}

fn quad_form(chol: &Cholesky<f64, nalgebra::Dyn>, y: &DMatrix<f64>) -> f64 {
    let c = chol.solve(y);
    let mut q = 0.0;
    for j in 0..y.ncols() {
        q += y.column(j).dot(&c.column(j));
    }
    q
}

/// rho from precomputed Gram matrices. Both quadratic forms share one nugget,
/// escalated 10x from the larger base until Cholesky succeeds on both; the
/// ladder is uncapped below a Gershgorin-style bound.
pub(crate) fn rho_from_grams(
    kb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    kc: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    nugget: Option<f64>,
) -> Result<f64> {
    let base = nugget.unwrap_or_else(|| base_nugget(kb).max(base_nugget(kc)));
    let maxabs = kb
        .iter()
        .chain(kc.iter())
        .fold(1.0_f64, |a, v| a.max(v.abs()));
    let bound = 1e8 * maxabs;
    let nb = kb.nrows();
    let nc = kc.nrows();
    let mut lam = base;
    loop {
        let rb = kb + DMatrix::identity(nb, nb) * lam;
        let rc = kc + DMatrix::identity(nc, nc) * lam;
        if let (Some(chb), Some(chc)) = (Cholesky::new(rb), Cholesky::new(rc)) {
            let qb = quad_form(&chb, yb);
            let qc = quad_form(&chc, yc);
            if qb.abs() <= 1e-14 {
                return Err(KflowError::ZeroDenominator(qb));
            }
            return Ok(1.0 - qc / qb);
        }
        let next = lam * 10.0;
        if next > bound {
            return Err(KflowError::SingularGram {
                last_nugget: lam,
                residual: f64::INFINITY,
            });
        }
        lam = next;
    }
}

fn rows_equal(a: &DMatrix<f64>, ia: usize, b: &DMatrix<f64>, ib: usize) -> bool {
    (0..a.ncols()).all(|c| a[(ia, c)] == b[(ib, c)])
}

/// The KF loss 1 - (Yc^T Kc^{-1} Yc)/(Yb^T Kb^{-1} Yb). Multi-column Y sums
/// numerator and denominator over columns. When every c-row is found inside
/// Xb the c-Gram is extracted from the b-Gram, keeping the nested forms
/// exactly consistent.
pub fn rho(
    spec: &KernelSpec,
    theta: &[f64],
    xb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    xc: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    nugget: Option<f64>,
) -> Result<f64> {
    if xb.nrows() != yb.nrows() || xc.nrows() != yc.nrows() || yb.ncols() != yc.ncols() {
        return Err(KflowError::DimensionMismatch(
            "rho input row/column counts disagree".into(),
        ));
    }
    let kb = kernels::gram(spec, theta, xb)?;
    let pos: Option<Vec<usize>> = xc
        .row_iter()
        .enumerate()
        .map(|(ic, _)| (0..xb.nrows()).find(|&ib| rows_equal(xc, ic, xb, ib)))
        .collect();
    let kc = match pos {
        Some(p) => kb.select_rows(p.iter()).select_columns(p.iter()),
        None => kernels::gram(spec, theta, xc)?,
    };
    rho_from_grams(&kb, yb, &kc, yc, nugget)
}

/// Squared maximum mean discrepancy between two samples, V-statistic form:
/// mean k(S1,S1) + mean k(S2,S2) - 2 mean k(S1,S2), diagonal terms included.
pub fn mmd2(spec: &KernelSpec, theta: &[f64], s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if s1.nrows() == 0 || s2.nrows() == 0 {
        return Err(KflowError::DimensionMismatch("empty MMD sample".into()));
    }
    if s1.ncols() != s2.ncols() {
        return Err(KflowError::DimensionMismatch(format!(
            "MMD samples of dim {} vs {}",
            s1.ncols(),
            s2.ncols()
        )));
    }
    let k11 = kernels::gram(spec, theta, s1)?;
    let k22 = kernels::gram(spec, theta, s2)?;
    let mut cross = 0.0;
    let mut row = vec![0.0; s1.ncols()];
    for i in 0..s1.nrows() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = s1[(i, c)];
        }
        cross += kernels::cross_gram(spec, theta, &row, s2)?.sum();
    }
    let m = s1.nrows() as f64;
    let n = s2.nrows() as f64;
    Ok(k11.sum() / (m * m) + k22.sum() / (n * n) - 2.0 * cross / (m * n))
}

/// Draws two disjoint uniform samples of `m` rows from `x` and returns their
/// mmd2 under the kernel.
pub fn rho_mmd(
    spec: &KernelSpec,
    theta: &[f64],
    x: &DMatrix<f64>,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let n = x.nrows();
    if m == 0 || 2 * m > n {
        return Err(KflowError::SampleTooLarge { m, need: 2 * m, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, n, 2 * m).into_vec();
    let s1 = x.select_rows(idx[..m].iter());
    let s2 = x.select_rows(idx[m..].iter());
    mmd2(spec, theta, &s1, &s2)
}

/// Maximal-exponent estimator choice.
#[derive(Debug, Clone, PartialEq)]
pub enum LyapEstimator {
    /// Nearest-neighbor log-divergence slopes (model-free).
    DivergenceFit,
    /// Orbit average of log|f'| for a known scalar map (diagnostics only).
    MeanLogDerivative(MapSystem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub estimator: LyapEstimator,
    /// Surrogate rollout length used by rho_L.
    pub rollout_len: usize,
    /// Rollout steps discarded before estimation.
    pub transient_skip: usize,
    /// Neighbor separation floor; None derives mean-NN-distance / 10.
    pub min_sep: Option<f64>,
    /// Number of divergence steps fitted per neighbor pair.
    pub fit_length: usize,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            estimator: LyapEstimator::DivergenceFit,
            rollout_len: 2000,
            transient_skip: 100,
            min_sep: None,
            fit_length: 10,
        }
    }
}

/// Largest Lyapunov exponent of a trajectory, in log units per step.
pub fn lyapunov_max(series: &TrajectoryRecord, config: &LyapunovConfig) -> Result<f64> {
    match &config.estimator {
        LyapEstimator::MeanLogDerivative(map) => mean_log_derivative(series, map),
        LyapEstimator::DivergenceFit => divergence_fit(series, config),
    }
}

fn mean_log_derivative(series: &TrajectoryRecord, map: &MapSystem) -> Result<f64> {
    if series.is_empty() {
        return Err(KflowError::SeriesTooShort { len: 0, need: 1 });
    }
    if series.dim() != 1 {
        return Err(KflowError::DimensionMismatch(
            "mean-log-derivative estimator needs a scalar series".into(),
        ));
    }
    let deriv: Box<dyn Fn(f64) -> f64> = match map {
        MapSystem::Bernoulli => Box::new(|_| 2.0),
        MapSystem::Logistic => Box::new(|x| 4.0 - 8.0 * x),
        _ => {
            return Err(KflowError::DimensionMismatch(
                "mean-log-derivative estimator needs a scalar map".into(),
            ))
        }
    };
    let sum: f64 = series
        .states
        .iter()
        .map(|s| deriv(s[0]).abs().max(1e-300).ln())
        .sum();
    Ok(sum / series.len() as f64)
}

fn lls_slope(ld: &[f64]) -> f64 {
    // least-squares slope of ld against 0..len-1
    let n = ld.len() as f64;
    let kbar = (n - 1.0) / 2.0;
    let lbar = ld.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, l) in ld.iter().enumerate() {
        let dk = k as f64 - kbar;
        num += dk * (l - lbar);
        den += dk * dk;
    }
    num / den
}

fn divergence_fit(series: &TrajectoryRecord, config: &LyapunovConfig) -> Result<f64> {
    let n = series.len();
    let fit = config.fit_length;
    if fit == 0 || n < fit + 3 {
        return Err(KflowError::SeriesTooShort { len: n, need: fit + 3 });
    }
    let maxi = n - fit - 1;
    if series.dim() == 1 {
        let s: Vec<f64> = series.states.iter().map(|st| st[0]).collect();
        divergence_fit_1d(&s, maxi, fit, config.min_sep)
    } else {
        divergence_fit_nd(&series.states, maxi, fit, config.min_sep)
    }
}

/// Scalar fast path: nearest neighbors via one sort plus bounded outward
/// scans instead of the quadratic distance table.
fn divergence_fit_1d(s: &[f64], maxi: usize, fit: usize, min_sep: Option<f64>) -> Result<f64> {
    let pts = &s[..maxi];
    let mut order: Vec<usize> = (0..maxi).collect();
    order.sort_by(|&a, &b| pts[a].total_cmp(&pts[b]));
    let sorted_pts: Vec<f64> = order.iter().map(|&i| pts[i]).collect();

    let min_sep = min_sep.unwrap_or_else(|| {
        let mut nnsum = 0.0;
        for p in 0..maxi {
            let mut d = f64::INFINITY;
            if p > 0 {
                d = d.min(sorted_pts[p] - sorted_pts[p - 1]);
            }
            if p + 1 < maxi {
                d = d.min(sorted_pts[p + 1] - sorted_pts[p]);
            }
            nnsum += d;
        }
        nnsum / maxi as f64 / 10.0
    });

    let mut slope_sum = 0.0;
    let mut count = 0usize;
    let mut ld = vec![0.0; fit + 1];
    for i in 0..maxi {
        let pos = sorted_pts.partition_point(|&v| v < pts[i]);
        let mut best_j = usize::MAX;
        let mut best_d = f64::INFINITY;
        for off in 1..maxi {
            let lo = pos as isize - off as isize;
            let hi = pos + off;
            let mut found = false;
            for p in [lo, hi as isize] {
                if p >= 0 && (p as usize) < maxi {
                    let p = p as usize;
                    let j = order[p];
                    if j == i {
                        continue;
                    }
                    let d = (pts[j] - pts[i]).abs();
                    if d >= min_sep && d < best_d {
                        best_j = j;
                        best_d = d;
                    }
                    found = true;
                }
            }
            // Stop once both sorted-side windows extend past the best match.
            let left_done = lo < 0 || sorted_pts[pos] - sorted_pts[lo.max(0) as usize] > best_d;
            let right_done =
                hi >= maxi || sorted_pts[hi.min(maxi - 1)] - sorted_pts[pos] > best_d;
            if best_j != usize::MAX && left_done && right_done {
                break;
            }
            if !found {
                break;
            }
        }
        if best_j == usize::MAX {
            continue;
        }
        for (k, l) in ld.iter_mut().enumerate() {
            let d = (s[i + k] - s[best_j + k]).abs();
            *l = d.max(1e-300).ln();
        }
        slope_sum += lls_slope(&ld);
        count += 1;
    }
    if count == 0 {
        return Err(KflowError::NoValidNeighbors);
    }
    Ok(slope_sum / count as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        d2 += d * d;
    }
    d2.sqrt()
}

fn divergence_fit_nd(
    states: &[Vec<f64>],
    maxi: usize,
    fit: usize,
    min_sep: Option<f64>,
) -> Result<f64> {
    let min_sep = min_sep.unwrap_or_else(|| {
        let mut nnsum = 0.0;
        for i in 0..maxi {
            let mut best = f64::INFINITY;
            for j in 0..maxi {
                if j != i {
                    best = best.min(dist(&states[i], &states[j]));
                }
            }
            nnsum += best;
        }
        nnsum / maxi as f64 / 10.0
    });

    let mut slope_sum = 0.0;
    let mut count = 0usize;
    let mut ld = vec![0.0; fit + 1];
    for i in 0..maxi {
        let mut best_j = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..maxi {
            if j == i {
                continue;
            }
            let d = dist(&states[i], &states[j]);
            if d >= min_sep && d < best_d {
                best_j = j;
                best_d = d;
            }
        }
        if best_j == usize::MAX {
            continue;
        }
        for (k, l) in ld.iter_mut().enumerate() {
            let d = dist(&states[i + k], &states[best_j + k]);
            *l = d.max(1e-300).ln();
        }
        slope_sum += lls_slope(&ld);
        count += 1;
    }
    if count == 0 {
        return Err(KflowError::NoValidNeighbors);
    }
    Ok(slope_sum / count as f64)
}

/// Lyapunov-discrepancy loss: fit surrogates on the full index set (or a
/// seeded batch) and on a seeded half, roll each out from the dataset's first
/// window, and return |lambda_full - lambda_half|.
pub fn rho_l(
    kernel_specs: &[KernelSpec],
    dataset: &DelayDataset,
    lyap: &LyapunovConfig,
    seed: u64,
    nugget: Option<f64>,
    batch: Option<usize>,
) -> Result<f64> {
    let n = dataset.len();
    if n < 4 {
        return Err(KflowError::SeriesTooShort { len: n, need: 4 });
    }
    if lyap.rollout_len <= lyap.transient_skip {
        return Err(KflowError::DimensionMismatch(
            "rollout_len must exceed transient_skip".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full_idx: Vec<usize> = match batch {
        Some(nb) => {
            if nb < 4 || nb > n {
                return Err(KflowError::BatchTooLarge { nb, n });
            }
            rand::seq::index::sample(&mut rng, n, nb).into_vec()
        }
        None => (0..n).collect(),
    };
    let nf = full_idx.len();
    let half_pick = rand::seq::index::sample(&mut rng, nf, nf / 2).into_vec();
    let half_idx: Vec<usize> = half_pick.iter().map(|&p| full_idx[p]).collect();

    let width = dataset.input_components.len();
    let seed_window = regress::seed_window_from_row(&dataset.x, 0, width);
    let mut lambdas = [0.0; 2];
    for (slot, idx) in [&full_idx, &half_idx].into_iter().enumerate() {
        let sub = embedding::select_rows(dataset, idx);
        let model = regress::fit(&sub, kernel_specs, nugget)?;
        let roll = model.rollout_bounded(&seed_window, lyap.rollout_len, Some(1e6))?;
        let trimmed = TrajectoryRecord::new(
            roll.states[lyap.transient_skip..].to_vec(),
            1.0,
            "surrogate rollout",
        );
        lambdas[slot] = lyapunov_max(&trimmed, lyap)?;
    }
    Ok((lambdas[0] - lambdas[1]).abs())
}
