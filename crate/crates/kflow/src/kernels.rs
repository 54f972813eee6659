//! Parameterized radial kernel families: weighted sums of primitives, each a
//! function of r = ||x - y||_2 only, with a flat parameter vector theta.

use crate::error::{KflowError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Scale parameters are clamped away from zero at this magnitude during
/// evaluation; every clamp increments the diagnostics counter.
pub const SIGMA_FLOOR: f64 = 1e-8;

static SIGMA_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of sigma clamps applied so far (process-wide diagnostics counter).
pub fn sigma_clamp_count() -> u64 {
    SIGMA_CLAMPS.load(Ordering::Relaxed)
}

fn clamp_sigma(s: f64) -> f64 {
    if s.abs() < SIGMA_FLOOR {
        SIGMA_CLAMPS.fetch_add(1, Ordering::Relaxed);
        log::debug!("scale parameter {s:e} clamped to magnitude {SIGMA_FLOOR:e}");
        if s.is_sign_negative() {
            -SIGMA_FLOOR
        } else {
            SIGMA_FLOOR
        }
    } else {
        s
    }
}

/// exp with a hard cutoff: arguments below -700 return exactly 0. Subnormal
/// results otherwise slow the Gram loops by orders of magnitude.
#[inline]
pub fn gexp(z: f64) -> f64 {
    if z < -700.0 {
        0.0
    } else {
        z.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Constant,
    Triangular,
    Gaussian,
    Laplace,
    LocallyPeriodic,
    Quadratic,
    PowerRational,
}

impl PrimitiveKind {
    /// Fixed slot count per kind:
    /// Constant 1 (alpha); Triangular 2 (alpha, sigma); Gaussian 2; Laplace 2;
    /// LocallyPeriodic 4 (alpha, s1, s2, s3); Quadratic 1 (alpha);
    /// PowerRational 4 (alpha0, beta0, gamma, sigma).
    pub fn slot_count(self) -> usize {
        match self {
            PrimitiveKind::Constant | PrimitiveKind::Quadratic => 1,
            PrimitiveKind::Triangular | PrimitiveKind::Gaussian | PrimitiveKind::Laplace => 2,
            PrimitiveKind::LocallyPeriodic | PrimitiveKind::PowerRational => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrimitiveFlags {
    /// LocallyPeriodic oscillates in r^2 by default; set to oscillate in r.
    #[serde(default)]
    pub periodic_on_r: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    #[serde(default)]
    pub flags: PrimitiveFlags,
}

impl Primitive {
    pub fn new(kind: PrimitiveKind) -> Self {
        Primitive {
            kind,
            flags: PrimitiveFlags::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "raw")]
    Raw,
    /// Effective amplitude of each primitive is the square of its stored slot.
    #[serde(rename = "squared")]
    SquaredAmplitudes,
}

/// A kernel family: ordered primitives plus a flat theta vector whose length
/// equals the sum of the primitive slot counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub mode: Mode,
    pub primitives: Vec<Primitive>,
    pub theta: Vec<f64>,
}

impl KernelSpec {
    pub fn new(mode: Mode, primitives: Vec<Primitive>, theta: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec {
            mode,
            primitives,
            theta,
        };
        spec.check_arity(&spec.theta)?;
        Ok(spec)
    }

    pub fn slot_count(&self) -> usize {
        self.primitives.iter().map(|p| p.kind.slot_count()).sum()
    }

    pub fn check_arity(&self, theta: &[f64]) -> Result<()> {
        let want = self.slot_count();
        if theta.len() != want {
            return Err(KflowError::ParameterArity {
                want,
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Offset of each primitive's amplitude slot (its first slot).
    pub fn amplitude_slots(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.primitives.len());
        let mut off = 0;
        for p in &self.primitives {
            out.push(off);
            off += p.kind.slot_count();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("kernel spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: KernelSpec = serde_json::from_str(s)
            .map_err(|e| KflowError::DimensionMismatch(format!("kernel spec parse: {e}")))?;
        spec.check_arity(&spec.theta)?;
        Ok(spec)
    }
}

fn primitive_value(p: &Primitive, slots: &[f64], amp: f64, r2: f64) -> Result<f64> {
    let v = match p.kind {
        PrimitiveKind::Constant => amp,
        PrimitiveKind::Triangular => {
            let s = clamp_sigma(slots[1]);
            amp * (1.0 - r2 / s).max(0.0)
        }
        PrimitiveKind::Gaussian => {
            let s = clamp_sigma(slots[1]);
            amp * gexp(-r2 / (s * s))
        }
        PrimitiveKind::Laplace => {
            let s = clamp_sigma(slots[1]);
            amp * gexp(-r2.sqrt() / s)
        }
        PrimitiveKind::LocallyPeriodic => {
            let s1 = slots[1];
            let s2 = slots[2];
            let s3 = clamp_sigma(slots[3]);
            let u = if p.flags.periodic_on_r { r2.sqrt() } else { r2 };
            let osc = (std::f64::consts::PI * s2 * u).sin();
            amp * gexp(-s1 * osc * osc) * gexp(-r2 / (s3 * s3))
        }
        PrimitiveKind::Quadratic => amp * r2,
        PrimitiveKind::PowerRational => {
            // amp plays the role of the additive constant alpha0.
            let b0 = slots[1];
            let g = slots[2];
            let s = slots[3];
            if g < 0.0 && r2 == 0.0 {
                return Err(KflowError::NonFinite(
                    "power kernel 0^gamma with negative gamma".into(),
                ));
            }
            let r = r2.sqrt();
            let rg = if g == 0.0 { 1.0 } else { r.powf(g) };
            amp + (b0 + rg).powf(s)
        }
    };
    if !v.is_finite() {
        return Err(KflowError::NonFinite(format!(
            "{:?} primitive value at r^2 = {r2:e}",
            p.kind
        )));
    }
    Ok(v)
}

/// Kernel value as a function of the squared distance r^2.
pub fn eval_r2(spec: &KernelSpec, theta: &[f64], r2: f64) -> Result<f64> {
    spec.check_arity(theta)?;
    let mut total = 0.0;
    let mut off = 0;
    for p in &spec.primitives {
        let n = p.kind.slot_count();
        let slots = &theta[off..off + n];
        let amp = match spec.mode {
            Mode::Raw => slots[0],
            Mode::SquaredAmplitudes => slots[0] * slots[0],
        };
        total += primitive_value(p, slots, amp, r2)?;
        off += n;
    }
    if !total.is_finite() {
        return Err(KflowError::NonFinite("kernel sum".into()));
    }
    Ok(total)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut d2 = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        d2 += d * d;
    }
    d2
}

/// Pointwise kernel evaluation k(x, y).
pub fn eval(spec: &KernelSpec, theta: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(KflowError::DimensionMismatch(format!(
            "kernel arguments of dim {} vs {}",
            x.len(),
            y.len()
        )));
    }
    eval_r2(spec, theta, sq_dist(x, y))
}

fn row_sq_dist(points: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut d2 = 0.0;
    for c in 0..points.ncols() {
        let d = points[(i, c)] - points[(j, c)];
        d2 += d * d;
    }
    d2
}

fn row_sq_dist_to(points: &DMatrix<f64>, i: usize, x: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for (c, xv) in x.iter().enumerate() {
        let d = points[(i, c)] - xv;
        d2 += d * d;
    }
    d2
}

/// Gram matrix over the rows of `points`; each unordered pair is evaluated
/// once, so the result is exactly symmetric.
pub fn gram(spec: &KernelSpec, theta: &[f64], points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.check_arity(theta)?;
    let n = points.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = eval_r2(spec, theta, row_sq_dist(points, i, j))?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Vector of k(x, x_i) over the rows of `points`.
pub fn cross_gram(
    spec: &KernelSpec,
    theta: &[f64],
    x: &[f64],
    points: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    spec.check_arity(theta)?;
    if points.nrows() > 0 && x.len() != points.ncols() {
        return Err(KflowError::DimensionMismatch(format!(
            "query dim {} vs training dim {}",
            x.len(),
            points.ncols()
        )));
    }
    let mut out = DVector::zeros(points.nrows());
    for i in 0..points.nrows() {
        out[i] = eval_r2(spec, theta, row_sq_dist_to(points, i, x))?;
    }
    Ok(out)
}
