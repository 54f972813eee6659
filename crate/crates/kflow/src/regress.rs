//! Kernel interpolation of the one-step map: regularized Gram solves,
//! per-component surrogate models, predictive variance, error intervals,
//! free-running rollout, and JSON persistence.

use crate::dynamics::TrajectoryRecord;
use crate::embedding::{self, DelayDataset};
use crate::error::{KflowError, Result};
use crate::kernels::{self, KernelSpec};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Nugget ladder: start at BASE_SCALE * |mean diag|, floor at NUGGET_FLOOR,
/// escalate by 10x up to NUGGET_CAP while the Cholesky residual check fails.
pub const NUGGET_BASE_SCALE: f64 = 1e-10;
pub const NUGGET_FLOOR: f64 = 1e-16;
pub const NUGGET_CAP: f64 = 1e-4;
/// Accepted Cholesky solves must reproduce Y to this relative infinity-norm.
pub const RESID_TOL_CHOL: f64 = 1e-8;
/// The truncated-eigen fallback tolerates a looser residual.
pub const RESID_TOL_EIGEN: f64 = 1e-4;
/// Relative eigenvalue cutoff for the truncated-eigen fallback.
pub const EIGEN_CUT_REL: f64 = 1e-12;

/// Default ladder base for a Gram matrix.
pub fn base_nugget(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    if n == 0 {
        return NUGGET_FLOOR;
    }
    let mean = (0..n).map(|i| k[(i, i)]).sum::<f64>() / n as f64;
    (NUGGET_BASE_SCALE * mean.abs()).max(NUGGET_FLOOR)
}

/// Reusable factorization of K + lambda I.
#[derive(Debug, Clone)]
pub enum Factor {
    Chol(Cholesky<f64, Dyn>),
    /// Truncated symmetric-eigen pseudo-inverse (small eigenvalues dropped).
    Eigen {
        vecs: DMatrix<f64>,
        inv_vals: DVector<f64>,
    },
}

impl Factor {
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Factor::Chol(c) => c.solve(b),
            Factor::Eigen { vecs, inv_vals } => {
                let mut t = vecs.transpose() * b;
                for i in 0..t.nrows() {
                    for j in 0..t.ncols() {
                        t[(i, j)] *= inv_vals[i];
                    }
                }
                vecs * t
            }
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Factor::Chol(c) => c.solve(b),
            Factor::Eigen { vecs, inv_vals } => {
                let mut t = vecs.transpose() * b;
                for i in 0..t.nrows() {
                    t[i] *= inv_vals[i];
                }
                vecs * t
            }
        }
    }
}

/// Result of a regularized Gram solve (K + lambda I) C = Y.
#[derive(Debug, Clone)]
pub struct GramSolve {
    pub factor: Factor,
    pub nugget: f64,
    pub coeffs: DMatrix<f64>,
    /// Infinity norm of (K + lambda I) C - Y.
    pub residual: f64,
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn resid_inf(k_reg: &DMatrix<f64>, c: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    inf_norm(&(k_reg * c - y))
}

/// Solves (K + lambda I) C = Y under the nugget ladder. Cholesky attempts
/// escalate lambda by 10x up to NUGGET_CAP until the residual check passes;
/// past the cap a truncated symmetric-eigen pseudo-inverse at the base
/// nugget is accepted under the looser residual tolerance.
pub fn solve_gram(k: &DMatrix<f64>, y: &DMatrix<f64>, base: Option<f64>) -> Result<GramSolve> {
    let n = k.nrows();
    if y.nrows() != n {
        return Err(KflowError::DimensionMismatch(format!(
            "gram side {n} vs rhs rows {}",
            y.nrows()
        )));
    }
    let base = base.unwrap_or_else(|| base_nugget(k));
    let ynorm = inf_norm(y).max(1.0);
    let eye = DMatrix::identity(n, n);

    let mut lam = base;
    let last_lam = loop {
        let reg = k + &eye * lam;
        if let Some(chol) = Cholesky::new(reg.clone()) {
            let c = chol.solve(y);
            let r = resid_inf(&reg, &c, y);
            if r <= RESID_TOL_CHOL * ynorm {
                return Ok(GramSolve {
                    factor: Factor::Chol(chol),
                    nugget: lam,
                    coeffs: c,
                    residual: r,
                });
            }
            log::debug!("nugget {lam:e}: residual {r:e} above tolerance, escalating");
        } else {
            log::debug!("nugget {lam:e}: Cholesky failed, escalating");
        }
        let next = lam * 10.0;
        if next > NUGGET_CAP {
            break lam;
        }
        lam = next;
    };

    // Indefinite or extremely ill-conditioned Gram: drop the near-null space.
    log::warn!("nugget ladder exhausted at {last_lam:e}, trying truncated eigendecomposition");
    let reg = k + &eye * base;
    let eig = SymmetricEigen::new(reg.clone());
    let maxval = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cut = EIGEN_CUT_REL * maxval;
    let inv_vals = DVector::from_fn(n, |i, _| {
        let v = eig.eigenvalues[i];
        if v.abs() > cut {
            1.0 / v
        } else {
            0.0
        }
    });
    let factor = Factor::Eigen {
        vecs: eig.eigenvectors,
        inv_vals,
    };
    let c = factor.solve_mat(y);
    let r = resid_inf(&reg, &c, y);
    if r <= RESID_TOL_EIGEN * ynorm {
        return Ok(GramSolve {
            factor,
            nugget: base,
            coeffs: c,
            residual: r,
        });
    }
    Err(KflowError::SingularGram {
        last_nugget: last_lam,
        residual: r,
    })
}

/// One fitted output component: kernel, interpolation coefficients, and the
/// factorization reused for predictive variance.
#[derive(Debug, Clone)]
pub struct ComponentFit {
    pub kernel: KernelSpec,
    pub coeffs: DVector<f64>,
    pub factor: Factor,
    pub nugget: f64,
    pub residual: f64,
}

/// Per-component kernel interpolant of the one-step map.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub components: Vec<ComponentFit>,
    pub tau: usize,
    pub source_dim: usize,
    pub targets: Vec<usize>,
    pub input_components: Vec<usize>,
}

/// Fits one interpolant per target component on the dataset; `nugget`
/// overrides the ladder base (None selects it from the Gram diagonal).
pub fn fit(dataset: &DelayDataset, kernels: &[KernelSpec], nugget: Option<f64>) -> Result<SurrogateModel> {
    let m = dataset.target_count();
    if kernels.len() != m {
        return Err(KflowError::ParameterArity {
            want: m,
            got: kernels.len(),
        });
    }
    if dataset.is_empty() {
        return Err(KflowError::DimensionMismatch("empty training dataset".into()));
    }
    let n = dataset.len();
    let mut components = Vec::with_capacity(m);
    for (j, spec) in kernels.iter().enumerate() {
        let k = kernels::gram(spec, &spec.theta, &dataset.x)?;
        let yj = DMatrix::from_fn(n, 1, |r, _| dataset.y[(r, j)]);
        let gs = solve_gram(&k, &yj, nugget)?;
        components.push(ComponentFit {
            kernel: spec.clone(),
            coeffs: gs.coeffs.column(0).into_owned(),
            factor: gs.factor,
            nugget: gs.nugget,
            residual: gs.residual,
        });
    }
    Ok(SurrogateModel {
        x: dataset.x.clone(),
        y: dataset.y.clone(),
        components,
        tau: dataset.tau,
        source_dim: dataset.source_dim,
        targets: dataset.targets.clone(),
        input_components: dataset.input_components.clone(),
    })
}

impl SurrogateModel {
    pub fn input_width(&self) -> usize {
        self.x.ncols()
    }

    pub fn target_count(&self) -> usize {
        self.components.len()
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(KflowError::DimensionMismatch(format!(
                "query dim {} vs model input width {}",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Posterior mean per component: k(x,X) (K + lambda I)^{-1} Y.
    pub fn predict_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_query(x)?;
        let mut out = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let kx = kernels::cross_gram(&c.kernel, &c.kernel.theta, x, &self.x)?;
            out.push(kx.dot(&c.coeffs));
        }
        Ok(out)
    }

    /// Posterior variance per component: k(x,x) - k(x,X)(K+lambda I)^{-1}k(X,x).
    /// Round-off down to -1e-10 clamps to zero; below that the kernel is
    /// declared indefinite.
    pub fn predict_variance(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_query(x)?;
        let mut out = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let kx = kernels::cross_gram(&c.kernel, &c.kernel.theta, x, &self.x)?;
            let kxx = kernels::eval(&c.kernel, &c.kernel.theta, x, x)?;
            let v = kxx - kx.dot(&c.factor.solve_vec(&kx));
            if v < -1e-10 {
                return Err(KflowError::NegativeVariance(v));
            }
            out.push(v.max(0.0));
        }
        Ok(out)
    }

    /// Per-component norm factor sqrt(Y^T (K(X,X) + lambda I)^{-1} Y) over the
    /// reference dataset, fitted with this model's kernels and nugget policy.
    pub fn interval_norms(&self, reference: &DelayDataset) -> Result<Vec<f64>> {
        if reference.input_width() != self.input_width()
            || reference.target_count() != self.target_count()
        {
            return Err(KflowError::DimensionMismatch(
                "reference dataset shape differs from model".into(),
            ));
        }
        let n = reference.len();
        let mut out = Vec::with_capacity(self.components.len());
        for (j, c) in self.components.iter().enumerate() {
            let k = kernels::gram(&c.kernel, &c.kernel.theta, &reference.x)?;
            let yj = DMatrix::from_fn(n, 1, |r, _| reference.y[(r, j)]);
            let gs = solve_gram(&k, &yj, None)?;
            let quad = yj.column(0).dot(&gs.coeffs.column(0));
            out.push(quad.max(0.0).sqrt());
        }
        Ok(out)
    }

    /// Error half-widths sigma_i(x) * sqrt(Y^T K^{-1} Y) over the reference
    /// data (training plus testing points).
    pub fn error_interval(&self, x: &[f64], reference: &DelayDataset) -> Result<Vec<f64>> {
        let norms = self.interval_norms(reference)?;
        self.error_interval_with_norms(x, &norms)
    }

    /// Same as `error_interval` with the reference norms precomputed.
    pub fn error_interval_with_norms(&self, x: &[f64], norms: &[f64]) -> Result<Vec<f64>> {
        let vars = self.predict_variance(x)?;
        Ok(vars
            .iter()
            .zip(norms)
            .map(|(v, n)| v.sqrt() * n)
            .collect())
    }

    /// Free-running iteration: feeds each prediction back as the newest
    /// window entry. The seed window lists tau consecutive observed states in
    /// chronological order; the record holds the n_steps predicted target
    /// vectors (dt = 1). Requires every input component to be predicted.
    pub fn rollout(&self, seed_window: &[Vec<f64>], n_steps: usize) -> Result<TrajectoryRecord> {
        self.rollout_bounded(seed_window, n_steps, None)
    }

    /// `rollout` with an optional magnitude bound: any predicted component
    /// exceeding it aborts with NonFinite (used by loss evaluations to fail
    /// fast on diverging surrogates).
    pub fn rollout_bounded(
        &self,
        seed_window: &[Vec<f64>],
        n_steps: usize,
        bound: Option<f64>,
    ) -> Result<TrajectoryRecord> {
        let w = self.input_components.len();
        if seed_window.len() != self.tau {
            return Err(KflowError::DimensionMismatch(format!(
                "seed window has {} states, model needs {}",
                seed_window.len(),
                self.tau
            )));
        }
        if let Some(bad) = seed_window.iter().find(|s| s.len() != w) {
            return Err(KflowError::DimensionMismatch(format!(
                "seed state dim {} vs observed dim {w}",
                bad.len()
            )));
        }
        let feed: Vec<usize> = self
            .input_components
            .iter()
            .map(|c| {
                self.targets.iter().position(|t| t == c).ok_or_else(|| {
                    KflowError::DimensionMismatch(format!(
                        "rollout needs input component {c} among the targets"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let mut window: VecDeque<Vec<f64>> = seed_window.iter().cloned().collect();
        let mut xbuf = vec![0.0; w * self.tau];
        let mut states = Vec::with_capacity(n_steps);
        for step in 0..n_steps {
            for (j, s) in window.iter().rev().enumerate() {
                xbuf[j * w..(j + 1) * w].copy_from_slice(s);
            }
            let pred = self.predict_mean(&xbuf)?;
            let diverged = pred
                .iter()
                .any(|v| !v.is_finite() || bound.is_some_and(|b| v.abs() > b));
            if diverged {
                return Err(KflowError::NonFinite(format!(
                    "rollout diverged at step {}",
                    step + 1
                )));
            }
            let fed: Vec<f64> = feed.iter().map(|&p| pred[p]).collect();
            states.push(pred);
            window.pop_front();
            window.push_back(fed);
        }
        Ok(TrajectoryRecord::new(states, 1.0, "rollout"))
    }

    /// Teacher-forced one-step RMSE per component along an evaluation series:
    /// every prediction uses the true delay vector.
    pub fn one_step_errors(&self, eval_series: &TrajectoryRecord) -> Result<Vec<f64>> {
        let full = embedding::delay_embed(eval_series, self.tau, &self.targets)?;
        let all: Vec<usize> = (0..self.source_dim).collect();
        let ds = if self.input_components == all {
            full
        } else {
            embedding::project_inputs(&full, &self.input_components)?
        };
        if ds.input_width() != self.input_width() {
            return Err(KflowError::DimensionMismatch(format!(
                "embedded eval width {} vs model width {}",
                ds.input_width(),
                self.input_width()
            )));
        }
        let m = self.target_count();
        let mut acc = vec![0.0; m];
        let mut xrow = vec![0.0; ds.input_width()];
        for r in 0..ds.len() {
            for c in 0..ds.input_width() {
                xrow[c] = ds.x[(r, c)];
            }
            let pred = self.predict_mean(&xrow)?;
            for j in 0..m {
                let d = pred[j] - ds.y[(r, j)];
                acc[j] += d * d;
            }
        }
        Ok(acc.iter().map(|s| (s / ds.len() as f64).sqrt()).collect())
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            kernels: self.components.iter().map(|c| c.kernel.clone()).collect(),
            x: matrix_rows(&self.x),
            y: matrix_rows(&self.y),
            tau: self.tau,
            source_dim: self.source_dim,
            targets: self.targets.clone(),
            input_components: self.input_components.clone(),
            nuggets: self.components.iter().map(|c| c.nugget).collect(),
            residuals: self.components.iter().map(|c| c.residual).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    /// Rebuilds the model: coefficients are recomputed from the stored data
    /// and kernels, then validated against the stored residual checksum.
    pub fn from_json(text: &str) -> Result<SurrogateModel> {
        let doc: ModelDoc = serde_json::from_str(text)
            .map_err(|e| KflowError::DimensionMismatch(format!("model parse: {e}")))?;
        let n = doc.x.len();
        if n == 0 || doc.y.len() != n {
            return Err(KflowError::DimensionMismatch(
                "model data empty or x/y row counts differ".into(),
            ));
        }
        let width = doc.x[0].len();
        let m = doc.y[0].len();
        if doc.kernels.len() != m || doc.nuggets.len() != m || doc.residuals.len() != m {
            return Err(KflowError::DimensionMismatch(
                "model kernel/nugget/residual counts differ from target count".into(),
            ));
        }
        let x = DMatrix::from_fn(n, width, |r, c| doc.x[r][c]);
        let y = DMatrix::from_fn(n, m, |r, c| doc.y[r][c]);
        let mut components = Vec::with_capacity(m);
        for j in 0..m {
            let spec = &doc.kernels[j];
            spec.check_arity(&spec.theta)?;
            let k = kernels::gram(spec, &spec.theta, &x)?;
            let yj = DMatrix::from_fn(n, 1, |r, _| y[(r, j)]);
            let gs = solve_gram(&k, &yj, Some(doc.nuggets[j]))?;
            let ynorm = inf_norm(&yj).max(1.0);
            if (gs.residual - doc.residuals[j]).abs() > RESID_TOL_CHOL * ynorm {
                return Err(KflowError::ChecksumMismatch {
                    stored: doc.residuals[j],
                    got: gs.residual,
                });
            }
            components.push(ComponentFit {
                kernel: spec.clone(),
                coeffs: gs.coeffs.column(0).into_owned(),
                factor: gs.factor,
                nugget: gs.nugget,
                residual: gs.residual,
            });
        }
        Ok(SurrogateModel {
            x,
            y,
            components,
            tau: doc.tau,
            source_dim: doc.source_dim,
            targets: doc.targets,
            input_components: doc.input_components,
        })
    }
}

/// Reconstructs the chronological seed window (oldest state first) from one
/// row of a delay matrix whose blocks are stored newest first.
pub fn seed_window_from_row(x: &DMatrix<f64>, row: usize, width: usize) -> Vec<Vec<f64>> {
    let tau = x.ncols() / width;
    (0..tau)
        .rev()
        .map(|j| (0..width).map(|c| x[(row, j * width + c)]).collect())
        .collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    kernels: Vec<KernelSpec>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    tau: usize,
    source_dim: usize,
    targets: Vec<usize>,
    input_components: Vec<usize>,
    nuggets: Vec<f64>,
    residuals: Vec<f64>,
}
