//! Kernel-parameter learning: finite-difference gradient descent over the
//! rho, rho_L, or rho_MMD losses with a seeded per-iteration batch stream.

use crate::embedding::DelayDataset;
use crate::error::{KflowError, Result};
use crate::kernels::KernelSpec;
use crate::metrics::{self, LyapunovConfig};
use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Rho,
    RhoL,
    RhoMmd,
}

/// Slot-wise parameter bounds applied after every gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaClamps {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub metric: Metric,
    pub iterations: usize,
    /// Gradient-descent step size delta.
    pub step_size: f64,
    /// rho batch size N_b; None uses the full dataset.
    pub batch_size: Option<usize>,
    /// Sample size m for rho_MMD.
    pub mmd_sample_size: usize,
    pub seed: u64,
    /// Relative finite-difference step, in (0, 1e-2].
    pub fd_step: f64,
    /// Applied slot-wise to every component's parameters.
    pub clamps: Option<ThetaClamps>,
    /// Project amplitude slots to unit Euclidean norm after each step
    /// (blocks the constant-kernel degeneracy of rho_MMD).
    pub renorm_amplitudes: bool,
    pub lyap: LyapunovConfig,
    pub nugget: Option<f64>,
    /// Record a full theta snapshot every k iterations (0 = never).
    pub snapshot_every: usize,
    /// Optional per-iteration batch size for rho_L (None = full dataset).
    pub rho_l_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            metric: Metric::Rho,
            iterations: 100,
            step_size: 0.1,
            batch_size: None,
            mmd_sample_size: 100,
            seed: 0,
            fd_step: 1e-4,
            clamps: None,
            renorm_amplitudes: false,
            lyap: LyapunovConfig::default(),
            nugget: None,
            snapshot_every: 0,
            rho_l_batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// None when the iteration was skipped (loss evaluation failed).
    pub loss: Option<f64>,
    pub batch_seed: u64,
    pub theta_snapshot: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Input kernels with their trained parameter vectors.
    pub kernels: Vec<KernelSpec>,
    pub history: Vec<HistoryEntry>,
    /// b-indices of the last drawn rho batch.
    pub last_batch: Option<Vec<usize>>,
    pub skipped: usize,
}

/// Central finite differences with relative step fd_step * max(1, |theta_i|).
/// Slots whose probes fail contribute 0 and are flagged; AllProbesFailed if
/// no slot succeeds.
pub fn numerical_gradient<F>(
    mut loss: F,
    theta: &[f64],
    fd_step: f64,
) -> Result<(Vec<f64>, Vec<bool>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(fd_step > 0.0 && fd_step <= 1e-2) {
        return Err(KflowError::DimensionMismatch(format!(
            "fd_step {fd_step:e} outside (0, 1e-2]"
        )));
    }
    let mut g = vec![0.0; theta.len()];
    let mut flagged = vec![false; theta.len()];
    let mut any_ok = false;
    for j in 0..theta.len() {
        let h = fd_step * theta[j].abs().max(1.0);
        let mut tp = theta.to_vec();
        tp[j] += h;
        let mut tm = theta.to_vec();
        tm[j] -= h;
        match (loss(&tp), loss(&tm)) {
            (Ok(lp), Ok(lm)) if lp.is_finite() && lm.is_finite() => {
                g[j] = (lp - lm) / (2.0 * h);
                any_ok = true;
            }
            _ => {
                flagged[j] = true;
                log::debug!("finite-difference probe failed for slot {j}");
            }
        }
    }
    if !any_ok && !theta.is_empty() {
        return Err(KflowError::AllProbesFailed);
    }
    Ok((g, flagged))
}

fn column_matrix(m: &DMatrix<f64>, col: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), 1, |r, _| m[(r, col)])
}

fn with_theta(spec: &KernelSpec, theta: &[f64]) -> KernelSpec {
    KernelSpec {
        mode: spec.mode,
        primitives: spec.primitives.clone(),
        theta: theta.to_vec(),
    }
}

fn renorm_amplitude_slots(spec: &KernelSpec, theta: &mut [f64]) {
    let slots = spec.amplitude_slots();
    let norm = slots
        .iter()
        .map(|&s| theta[s] * theta[s])
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for &s in &slots {
            theta[s] /= norm;
        }
    }
}

/// The KF loop: per iteration, draw seeded batches, evaluate the configured
/// loss, and move each component's parameters one central-difference gradient
/// step (norm-clipped at 1). Loss failures skip the iteration; more than
/// iterations/2 consecutive skips abort.
pub fn kernel_flow(
    dataset: &DelayDataset,
    kernels0: &[KernelSpec],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let m = dataset.target_count();
    if kernels0.len() != m {
        return Err(KflowError::ParameterArity {
            want: m,
            got: kernels0.len(),
        });
    }
    for spec in kernels0 {
        spec.check_arity(&spec.theta)?;
    }
    if !(config.fd_step > 0.0 && config.fd_step <= 1e-2) {
        return Err(KflowError::DimensionMismatch(format!(
            "fd_step {} outside (0, 1e-2]",
            config.fd_step
        )));
    }
    if let Some(cl) = &config.clamps {
        for spec in kernels0 {
            let want = spec.slot_count();
            if cl.lo.len() != want || cl.hi.len() != want {
                return Err(KflowError::ParameterArity {
                    want,
                    got: cl.lo.len(),
                });
            }
        }
        if cl.lo.iter().zip(&cl.hi).any(|(l, h)| l > h) {
            return Err(KflowError::DimensionMismatch(
                "clamp lower bound above upper bound".into(),
            ));
        }
    }
    let n = dataset.len();
    let nb = config.batch_size.unwrap_or(n);

    let mut thetas: Vec<Vec<f64>> = kernels0.iter().map(|k| k.theta.clone()).collect();
    let mut history = Vec::with_capacity(config.iterations);
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last_batch: Option<Vec<usize>> = None;
    let mut skipped = 0usize;
    let mut consec = 0usize;
    let stall_limit = config.iterations / 2;

    for it in 0..config.iterations {
        let bseed = master.next_u64();

        // Per-iteration loss of one component at a candidate theta; batches
        // and samples are drawn once so probes differentiate theta only.
        let cur = thetas.clone();
        let eval: Box<dyn Fn(usize, &[f64]) -> Result<f64> + '_> = match config.metric {
            Metric::Rho => {
                let batch = metrics::sample_batch(n, nb, bseed)?;
                let pos = metrics::subset_positions(&batch);
                let xb = dataset.x.select_rows(batch.indices_b.iter());
                let yb = dataset.y.select_rows(batch.indices_b.iter());
                last_batch = Some(batch.indices_b.clone());
                let nugget = config.nugget;
                let specs = kernels0.to_vec();
                Box::new(move |i, th| {
                    let kb = crate::kernels::gram(&specs[i], th, &xb)?;
                    let kc = kb.select_rows(pos.iter()).select_columns(pos.iter());
                    let ybi = column_matrix(&yb, i);
                    let yci = ybi.select_rows(pos.iter());
                    metrics::rho_from_grams(&kb, &ybi, &kc, &yci, nugget)
                })
            }
            Metric::RhoMmd => {
                let mm = config.mmd_sample_size;
                if mm == 0 || 2 * mm > n {
                    return Err(KflowError::SampleTooLarge {
                        m: mm,
                        need: 2 * mm,
                        n,
                    });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(bseed);
                let idx = rand::seq::index::sample(&mut rng, n, 2 * mm).into_vec();
                let s1 = dataset.x.select_rows(idx[..mm].iter());
                let s2 = dataset.x.select_rows(idx[mm..].iter());
                let specs = kernels0.to_vec();
                Box::new(move |i, th| metrics::mmd2(&specs[i], th, &s1, &s2))
            }
            Metric::RhoL => {
                let specs = kernels0.to_vec();
                let lyap = config.lyap.clone();
                let nugget = config.nugget;
                let batch = config.rho_l_batch;
                let ds = dataset;
                Box::new(move |i, th| {
                    let mut full: Vec<KernelSpec> = specs
                        .iter()
                        .zip(&cur)
                        .map(|(s, t)| with_theta(s, t))
                        .collect();
                    full[i] = with_theta(&specs[i], th);
                    metrics::rho_l(&full, ds, &lyap, bseed, nugget, batch)
                })
            }
        };

        // Base loss; the rho_L loss is joint so it is evaluated once.
        let base_res: Result<f64> = match config.metric {
            Metric::RhoL => eval(0, &thetas[0]),
            _ => (0..m).try_fold(0.0, |acc, i| eval(i, &thetas[i]).map(|l| acc + l)),
        };
        let base = match base_res {
            Ok(l) if l.is_finite() => l,
            other => {
                if let Err(e) = other {
                    log::debug!("iteration {it}: loss failed ({e}), skipping");
                } else {
                    log::debug!("iteration {it}: loss not finite, skipping");
                }
                skipped += 1;
                consec += 1;
                history.push(HistoryEntry {
                    iteration: it,
                    loss: None,
                    batch_seed: bseed,
                    theta_snapshot: None,
                });
                if consec > stall_limit {
                    return Err(KflowError::TrainingStalled(consec));
                }
                continue;
            }
        };

        let mut moved = false;
        for i in 0..m {
            let grad = numerical_gradient(|th| eval(i, th), &thetas[i], config.fd_step);
            let (mut g, _) = match grad {
                Ok(g) => g,
                Err(KflowError::AllProbesFailed) => continue,
                Err(e) => return Err(e),
            };
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn > 1.0 {
                for v in &mut g {
                    *v /= gn;
                }
            }
            for (t, gv) in thetas[i].iter_mut().zip(&g) {
                *t -= config.step_size * gv;
            }
            if let Some(cl) = &config.clamps {
                for (j, t) in thetas[i].iter_mut().enumerate() {
                    *t = t.clamp(cl.lo[j], cl.hi[j]);
                }
            }
            if config.renorm_amplitudes {
                renorm_amplitude_slots(&kernels0[i], &mut thetas[i]);
            }
            moved = true;
        }
        if moved {
            consec = 0;
        } else {
            skipped += 1;
            consec += 1;
            if consec > stall_limit {
                return Err(KflowError::TrainingStalled(consec));
            }
        }
        let snapshot = if config.snapshot_every > 0 && (it + 1) % config.snapshot_every == 0 {
            Some(thetas.clone())
        } else {
            None
        };
        history.push(HistoryEntry {
            iteration: it,
            loss: Some(base),
            batch_seed: bseed,
            theta_snapshot: snapshot,
        });
    }

    let kernels = kernels0
        .iter()
        .zip(&thetas)
        .map(|(s, t)| with_theta(s, t))
        .collect();
    Ok(TrainOutcome {
        kernels,
        history,
        last_batch,
        skipped,
    })
}

/// CSV export `iter,loss`; skipped iterations leave the loss field empty.
pub fn history_to_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("iter,loss\n");
    for h in history {
        match h.loss {
            Some(l) => out.push_str(&format!("{},{}\n", h.iteration, l)),
            None => out.push_str(&format!("{},\n", h.iteration)),
        }
    }
    out
}
