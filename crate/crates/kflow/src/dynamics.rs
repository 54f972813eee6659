//! Benchmark systems (three maps, one ODE), fixed-step RK4 integration, and
//! exact big-integer doubling-map orbits.
//!
//! The doubling map needs exact orbits: in f64 arithmetic x -> 2x mod 1
//! discards one mantissa bit per step, so every float orbit collapses to 0
//! within 53 iterations. Long orbits are therefore generated in fixed-point
//! big-integer arithmetic and rounded to f64 only on readout.

use crate::error::{KflowError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapSystem {
    /// x -> 2x mod 1 on [0,1).
    Bernoulli,
    /// x -> 4x(1-x) on [0,1].
    Logistic,
    /// (x,y) -> (1 - a x^2 + y, b x).
    Henon { a: f64, b: f64 },
    /// Scalar second-order form of the Henon map: consumes the pair
    /// (x_k, x_{k-1}) newest first and returns (x_{k+1}, x_k) with
    /// x_{k+1} = 1 - a x_k^2 + b x_{k-1}.
    HenonScalar { a: f64, b: f64 },
}

impl MapSystem {
    pub fn state_dim(&self) -> usize {
        match self {
            MapSystem::Bernoulli | MapSystem::Logistic => 1,
            MapSystem::Henon { .. } | MapSystem::HenonScalar { .. } => 2,
        }
    }
}

/// One exact application of the map.
pub fn map_step(system: &MapSystem, state: &[f64]) -> Result<Vec<f64>> {
    if state.len() != system.state_dim() {
        return Err(KflowError::DimensionMismatch(format!(
            "map state dim {} but system needs {}",
            state.len(),
            system.state_dim()
        )));
    }
    Ok(match *system {
        MapSystem::Bernoulli => vec![(2.0 * state[0]).rem_euclid(1.0)],
        MapSystem::Logistic => vec![4.0 * state[0] * (1.0 - state[0])],
        MapSystem::Henon { a, b } => {
            vec![1.0 - a * state[0] * state[0] + state[1], b * state[0]]
        }
        MapSystem::HenonScalar { a, b } => {
            vec![1.0 - a * state[0] * state[0] + b * state[1], state[0]]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OdeSystem {
    Lorenz { s: f64, r: f64, b: f64, h: f64 },
}

impl OdeSystem {
    pub fn state_dim(&self) -> usize {
        match self {
            OdeSystem::Lorenz { .. } => 3,
        }
    }

    pub fn step_h(&self) -> f64 {
        match self {
            OdeSystem::Lorenz { h, .. } => *h,
        }
    }
}

/// Lorenz vector field (s(y-x), rx - y - xz, xy - bz).
pub fn lorenz_rhs(s: f64, r: f64, b: f64, state: &[f64]) -> [f64; 3] {
    let (x, y, z) = (state[0], state[1], state[2]);
    [s * (y - x), r * x - y - x * z, x * y - b * z]
}

/// Classical fourth-order Runge-Kutta update for an autonomous system.
pub fn rk4_step<F>(rhs: F, state: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let d = state.len();
    let k1 = rhs(state);
    let mut tmp: Vec<f64> = (0..d).map(|i| state[i] + 0.5 * h * k1[i]).collect();
    let k2 = rhs(&tmp);
    for i in 0..d {
        tmp[i] = state[i] + 0.5 * h * k2[i];
    }
    let k3 = rhs(&tmp);
    for i in 0..d {
        tmp[i] = state[i] + h * k3[i];
    }
    let k4 = rhs(&tmp);
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let v = state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        if !v.is_finite() {
            return Err(KflowError::NonFinite("rk4 stage produced non-finite value".into()));
        }
        out.push(v);
    }
    Ok(out)
}

/// One fixed-step integrator update of the ODE system.
pub fn ode_step(system: &OdeSystem, state: &[f64]) -> Result<Vec<f64>> {
    match *system {
        OdeSystem::Lorenz { s, r, b, h } => {
            rk4_step(|st| lorenz_rhs(s, r, b, st).to_vec(), state, h)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum System {
    Map(MapSystem),
    Ode(OdeSystem),
}

impl System {
    pub fn state_dim(&self) -> usize {
        match self {
            System::Map(m) => m.state_dim(),
            System::Ode(o) => o.state_dim(),
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            System::Map(_) => 1.0,
            System::Ode(o) => o.step_h(),
        }
    }
}

/// A simulated or predicted trajectory: ordered states, sampling interval,
/// and a short provenance string.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
    pub origin: String,
}

impl TrajectoryRecord {
    pub fn new(states: Vec<Vec<f64>>, dt: f64, origin: impl Into<String>) -> Self {
        TrajectoryRecord {
            states,
            dt,
            origin: origin.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Scalar series of one component.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    /// CSV with header `t,x0,...,x{d-1}`; time column is step index times dt.
    /// Numbers use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("t");
        for i in 0..d {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for (k, st) in self.states.iter().enumerate() {
            out.push_str(&format!("{}", k as f64 * self.dt));
            for v in st {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the `to_csv` format; dt is inferred from the first two rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| KflowError::DimensionMismatch("empty trajectory CSV".into()))?;
        let d = header.split(',').count().saturating_sub(1);
        if d == 0 {
            return Err(KflowError::DimensionMismatch(
                "trajectory CSV header has no state columns".into(),
            ));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(KflowError::DimensionMismatch(format!(
                    "trajectory CSV row {} has {} fields, want {}",
                    ln + 2,
                    fields.len(),
                    d + 1
                )));
            }
            let mut row = Vec::with_capacity(d);
            for f in &fields {
                let v: f64 = f.trim().parse().map_err(|_| {
                    KflowError::DimensionMismatch(format!("bad CSV number {f:?}"))
                })?;
                row.push(v);
            }
            times.push(row[0]);
            states.push(row[1..].to_vec());
        }
        let dt = if times.len() >= 2 { times[1] - times[0] } else { 1.0 };
        Ok(TrajectoryRecord::new(states, dt, "csv"))
    }
}

/// Simulates n_steps applications starting at x0; the record holds
/// n_steps + 1 states including x0.
pub fn simulate(system: &System, x0: &[f64], n_steps: usize) -> Result<TrajectoryRecord> {
    if x0.len() != system.state_dim() {
        return Err(KflowError::DimensionMismatch(format!(
            "initial condition dim {} but system needs {}",
            x0.len(),
            system.state_dim()
        )));
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.to_vec());
    let mut cur = x0.to_vec();
    for k in 0..n_steps {
        let next = match system {
            System::Map(m) => map_step(m, &cur)?,
            System::Ode(o) => ode_step(o, &cur)?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(KflowError::NonFinite(format!(
                "trajectory blew up at step {}",
                k + 1
            )));
        }
        states.push(next.clone());
        cur = next;
    }
    Ok(TrajectoryRecord::new(
        states,
        system.dt(),
        format!("{system:?} from {x0:?}"),
    ))
}

/// Exact fixed-point orbits of the doubling map.
pub mod exact {
    use num_bigint::BigInt;
    use num_traits::{One, ToPrimitive, Zero};

    /// pi in fixed point with `bits` fractional bits, via
    /// pi = 16 atan(1/5) - 4 atan(1/239) with 16 internal guard bits.
    pub fn machin_pi_fixed(bits: u64) -> BigInt {
        fn atan_inv(x: u64, bits: u64) -> BigInt {
            let one: BigInt = BigInt::one() << (bits + 16);
            let x = BigInt::from(x);
            let x2 = &x * &x;
            let mut term = &one / &x;
            let mut total = term.clone();
            let mut k: u64 = 1;
            while !term.is_zero() {
                term = &term / &x2;
                if term.is_zero() {
                    break;
                }
                let contrib = &term / BigInt::from(2 * k + 1);
                if k % 2 == 1 {
                    total -= contrib;
                } else {
                    total += contrib;
                }
                k += 1;
            }
            total
        }
        let pi = 16 * atan_inv(5, bits) - 4 * atan_inv(239, bits);
        pi >> 16u64
    }

    fn emit_orbit(mut x: BigInt, frac_bits: u64, n: usize) -> Vec<f64> {
        let mask = (BigInt::one() << frac_bits) - 1;
        let scale = (1u64 << 53) as f64;
        let mut out = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let top = (&x >> (frac_bits - 53)).to_u64().expect("top bits fit u64");
            out.push(top as f64 / scale);
            x = (x << 1u64) & &mask;
        }
        out
    }

    /// Orbit of frac(pi*num/den) under doubling, n+1 values. The state keeps
    /// n + 144 fractional bits so truncation error (< 2^(n-F)) never reaches
    /// the 53 emitted bits.
    pub fn bernoulli_orbit_pi(num: u64, den: u64, n: usize) -> Vec<f64> {
        let frac_bits = n as u64 + 64 + 80;
        let pi = machin_pi_fixed(frac_bits);
        let modulus = BigInt::one() << frac_bits;
        let x = (pi * num / den) % &modulus;
        emit_orbit(x, frac_bits, n)
    }

    /// Orbit of num/den under doubling, exactly in rational arithmetic.
    pub fn bernoulli_orbit_rational(num: u64, den: u64, n: usize) -> Vec<f64> {
        let mut x = (num % den) as u128;
        let den = den as u128;
        let mut out = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            out.push(x as f64 / den as f64);
            x = (2 * x) % den;
        }
        out
    }
}
