//! TOML experiment configuration: benchmark system, data generation, kernel
//! family, training settings, and output locations. Every field can be
//! overridden on the command line with `--set dotted.path=value`.

use kflow::dynamics::{MapSystem, OdeSystem, System};
use kflow::kernels::{KernelSpec, Mode, Primitive};
use kflow::metrics::{LyapEstimator, LyapunovConfig};
use kflow::train::{Metric, ThetaClamps, TrainConfig};
use serde::{Deserialize, Serialize};

/// A configuration problem: bad file, bad field, inconsistent values.
/// Mapped to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    /// x -> 2x mod 1.
    Bernoulli,
    /// x -> 4x(1-x).
    Logistic,
    /// (x,y) -> (1 - a x^2 + y, b x).
    Henon { a: f64, b: f64 },
    /// Scalar second-order form of the same map.
    HenonScalar { a: f64, b: f64 },
    /// RK4-integrated Lorenz flow sampled every h time units.
    Lorenz { s: f64, r: f64, b: f64, h: f64 },
}

impl SystemConfig {
    pub fn to_system(self) -> System {
        match self {
            SystemConfig::Bernoulli => System::Map(MapSystem::Bernoulli),
            SystemConfig::Logistic => System::Map(MapSystem::Logistic),
            SystemConfig::Henon { a, b } => System::Map(MapSystem::Henon { a, b }),
            SystemConfig::HenonScalar { a, b } => System::Map(MapSystem::HenonScalar { a, b }),
            SystemConfig::Lorenz { s, r, b, h } => System::Ode(OdeSystem::Lorenz { s, r, b, h }),
        }
    }

    pub fn dim(self) -> usize {
        self.to_system().state_dim()
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemConfig::Bernoulli => "bernoulli",
            SystemConfig::Logistic => "logistic",
            SystemConfig::Henon { .. } => "henon",
            SystemConfig::HenonScalar { .. } => "henon_scalar",
            SystemConfig::Lorenz { .. } => "lorenz",
        }
    }
}

/// Initial condition. Fractions of pi and rationals exist so the doubling
/// map can be iterated exactly (float orbits of it collapse to zero); for
/// other scalar systems they are converted to f64 before simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IcSpec {
    Float { values: Vec<f64> },
    /// x0 = frac(pi * num / den).
    PiFraction { num: u64, den: u64 },
    /// x0 = num / den.
    Rational { num: u64, den: u64 },
}

impl IcSpec {
    pub fn label(&self) -> String {
        match self {
            IcSpec::Float { values } => {
                let parts: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
                format!("({})", parts.join(","))
            }
            IcSpec::PiFraction { num, den } => format!("pi*{num}/{den}"),
            IcSpec::Rational { num, den } => format!("{num}/{den}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Map applications (or RK4 steps) in the training series; the series
    /// holds train_steps + 1 states.
    pub train_steps: usize,
    /// Length of each evaluation series, in steps.
    pub test_steps: usize,
    /// Delay-window length: states per regression input.
    #[serde(default = "default_tau")]
    pub tau: usize,
    pub initial: IcSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_initial: Vec<IcSpec>,
    /// Components visible to the regressor (partial observation); None keeps
    /// the full state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observe: Option<Vec<usize>>,
    /// Components of the next state used as regression targets; None
    /// predicts every component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
}

fn default_tau() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub mode: Mode,
    pub primitives: Vec<Primitive>,
    /// Initial parameter vector; one kernel per target component starts from
    /// this shared value.
    pub theta0: Vec<f64>,
}

impl KernelConfig {
    pub fn spec(&self) -> kflow::Result<KernelSpec> {
        KernelSpec::new(self.mode, self.primitives.clone(), self.theta0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Rho,
    RhoL,
    RhoMmd,
}

impl From<MetricName> for Metric {
    fn from(m: MetricName) -> Metric {
        match m {
            MetricName::Rho => Metric::Rho,
            MetricName::RhoL => Metric::RhoL,
            MetricName::RhoMmd => Metric::RhoMmd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub metric: MetricName,
    pub iterations: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default = "default_mmd_sample_size")]
    pub mmd_sample_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_hi: Option<Vec<f64>>,
    #[serde(default)]
    pub renorm_amplitudes: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nugget: Option<f64>,
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_l_batch: Option<usize>,
    /// Surrogate rollout length for the Lyapunov-discrepancy loss.
    #[serde(default = "default_rollout_len")]
    pub rollout_len: usize,
    #[serde(default = "default_transient_skip")]
    pub transient_skip: usize,
    #[serde(default = "default_fit_length")]
    pub fit_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_sep: Option<f64>,
    /// Fit the final interpolant on the last training batch instead of the
    /// full dataset.
    #[serde(default)]
    pub fit_on_last_batch: bool,
}

fn default_step_size() -> f64 {
    0.1
}

fn default_mmd_sample_size() -> usize {
    100
}

fn default_fd_step() -> f64 {
    1e-4
}

fn default_rollout_len() -> usize {
    2000
}

fn default_transient_skip() -> usize {
    100
}

fn default_fit_length() -> usize {
    10
}

impl TrainSection {
    pub fn to_train_config(&self) -> Result<TrainConfig, ConfigError> {
        let clamps = match (&self.clamp_lo, &self.clamp_hi) {
            (None, None) => None,
            (Some(lo), Some(hi)) => Some(ThetaClamps {
                lo: lo.clone(),
                hi: hi.clone(),
            }),
            _ => {
                return Err(ConfigError(
                    "clamp_lo and clamp_hi must be given together".into(),
                ))
            }
        };
        Ok(TrainConfig {
            metric: self.metric.into(),
            iterations: self.iterations,
            step_size: self.step_size,
            batch_size: self.batch_size,
            mmd_sample_size: self.mmd_sample_size,
            seed: self.seed,
            fd_step: self.fd_step,
            clamps,
            renorm_amplitudes: self.renorm_amplitudes,
            lyap: LyapunovConfig {
                estimator: LyapEstimator::DivergenceFit,
                rollout_len: self.rollout_len,
                transient_skip: self.transient_skip,
                min_sep: self.min_sep,
                fit_length: self.fit_length,
            },
            nugget: self.nugget,
            snapshot_every: self.snapshot_every,
            rho_l_batch: self.rho_l_batch,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSection {
    /// Largest delay examined; both curves cover tau = 0..=tau_max.
    #[serde(default = "default_tau_max")]
    pub tau_max: usize,
    /// Regularizer for the alignment-energy Gram; None uses the solver
    /// default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kmd_nugget: Option<f64>,
}

fn default_tau_max() -> usize {
    6
}

impl Default for TauSection {
    fn default() -> Self {
        TauSection {
            tau_max: default_tau_max(),
            kmd_nugget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory; None generates a unique per-run directory under
    /// runs/.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub data: DataConfig,
    pub kernel: KernelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub tau_sweep: TauSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Target components: the configured list, or every component.
    pub fn targets(&self) -> Vec<usize> {
        match &self.data.targets {
            Some(t) => t.clone(),
            None => (0..self.system.dim()).collect(),
        }
    }

    /// Observed components: the configured list, or every component.
    pub fn observed(&self) -> Vec<usize> {
        match &self.data.observe {
            Some(o) => o.clone(),
            None => (0..self.system.dim()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.system.dim();
        if self.data.tau == 0 {
            return Err(ConfigError("data.tau must be at least 1".into()));
        }
        self.check_ic(&self.data.initial)?;
        for ic in &self.data.test_initial {
            self.check_ic(ic)?;
        }
        for &c in self.targets().iter().chain(self.observed().iter()) {
            if c >= d {
                return Err(ConfigError(format!(
                    "component {c} out of range for a {d}-dimensional system"
                )));
            }
        }
        if let Some(obs) = &self.data.observe {
            if obs.is_empty() {
                return Err(ConfigError("data.observe must not be empty".into()));
            }
        }
        if let Some(t) = &self.data.targets {
            if t.is_empty() {
                return Err(ConfigError("data.targets must not be empty".into()));
            }
        }
        self.kernel
            .spec()
            .map_err(|e| ConfigError(format!("kernel: {e}")))?;
        self.train.to_train_config()?;
        if let (Some(lo), Some(hi)) = (&self.train.clamp_lo, &self.train.clamp_hi) {
            let want = self.kernel.theta0.len();
            if lo.len() != want || hi.len() != want {
                return Err(ConfigError(format!(
                    "clamps have {}/{} slots, kernel has {want}",
                    lo.len(),
                    hi.len()
                )));
            }
        }
        Ok(())
    }

    fn check_ic(&self, ic: &IcSpec) -> Result<(), ConfigError> {
        let d = self.system.dim();
        match ic {
            IcSpec::Float { values } => {
                if values.len() != d {
                    return Err(ConfigError(format!(
                        "initial condition has {} values, system needs {d}",
                        values.len()
                    )));
                }
            }
            IcSpec::PiFraction { den, .. } | IcSpec::Rational { den, .. } => {
                if *den == 0 {
                    return Err(ConfigError("fraction denominator must be nonzero".into()));
                }
                if d != 1 {
                    return Err(ConfigError(
                        "fractional initial conditions need a scalar system".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Applies `--set dotted.path=value` overrides through the TOML tree. Values
/// parse as TOML literals (numbers, booleans, arrays, inline tables); bare
/// words fall back to strings, and the word `none` removes the key.
pub fn apply_overrides(
    cfg: &ExperimentConfig,
    sets: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = toml::Value::try_from(cfg)
        .map_err(|e| ConfigError(format!("serialize for override: {e}")))?;
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override {s:?} is not KEY=VALUE")))?;
        let path = path.trim();
        let raw = raw.trim();
        if raw == "none" {
            remove_path(&mut root, path);
        } else {
            set_path(&mut root, path, parse_override_value(raw))?;
        }
    }
    let cfg: ExperimentConfig = root
        .try_into()
        .map_err(|e| ConfigError(format!("override produced an invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_override_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, val: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("bad override path {path:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("{p} in {path:?} is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| ConfigError(format!("parent of {path:?} is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), val);
    Ok(())
}

fn remove_path(root: &mut toml::Value, path: &str) {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        match cur.as_table_mut().and_then(|t| t.get_mut(*p)) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Some(t) = cur.as_table_mut() {
        t.remove(parts[parts.len() - 1]);
    }
}
