//! Built-in experiment presets for the benchmark systems. Each encodes a
//! complete configuration (data sizes, kernel family, training settings) so
//! runs are reproducible without hand-written files.

use crate::config::{
    DataConfig, ExperimentConfig, IcSpec, KernelConfig, MetricName, OutputSection, SystemConfig,
    TauSection, TrainSection,
};
use kflow::kernels::{Mode, Primitive, PrimitiveKind};

pub const PRESET_NAMES: [&str; 5] = [
    "bernoulli-3.1",
    "logistic-3.2",
    "henon-3.3",
    "henon-partial-3.3.2",
    "lorenz-3.4",
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "bernoulli-3.1" => Some(bernoulli()),
        "logistic-3.2" => Some(logistic()),
        "henon-3.3" => Some(henon()),
        "henon-partial-3.3.2" => Some(henon_partial()),
        "lorenz-3.4" => Some(lorenz()),
        _ => None,
    }
}

fn base_train(metric: MetricName, iterations: usize, step_size: f64, seed: u64) -> TrainSection {
    TrainSection {
        metric,
        iterations,
        step_size,
        batch_size: None,
        mmd_sample_size: 100,
        seed,
        fd_step: 1e-4,
        clamp_lo: None,
        clamp_hi: None,
        renorm_amplitudes: false,
        nugget: None,
        snapshot_every: 0,
        rho_l_batch: None,
        rollout_len: 2000,
        transient_skip: 100,
        fit_length: 10,
        min_sep: None,
        fit_on_last_batch: false,
    }
}

fn primitives(kinds: &[PrimitiveKind]) -> Vec<Primitive> {
    kinds.iter().map(|&k| Primitive::new(k)).collect()
}

/// Doubling map, exact orbit from pi/10, 200 training pairs; triangular plus
/// Gaussian kernel trained with the nested-batch loss.
fn bernoulli() -> ExperimentConfig {
    let mut train = base_train(MetricName::Rho, 100, 0.05, 1);
    train.batch_size = Some(100);
    train.clamp_lo = Some(vec![0.0, 0.05, 0.0, 0.05]);
    train.clamp_hi = Some(vec![10.0, 10.0, 10.0, 10.0]);
    ExperimentConfig {
        system: SystemConfig::Bernoulli,
        data: DataConfig {
            train_steps: 200,
            test_steps: 5000,
            tau: 1,
            initial: IcSpec::PiFraction { num: 1, den: 10 },
            test_initial: vec![
                IcSpec::PiFraction { num: 1, den: 10 },
                IcSpec::Rational { num: 1, den: 10 },
            ],
            observe: None,
            targets: None,
        },
        kernel: KernelConfig {
            mode: Mode::Raw,
            primitives: primitives(&[PrimitiveKind::Triangular, PrimitiveKind::Gaussian]),
            theta0: vec![0.0, 1.0, 1.0, 1.0],
        },
        train,
        tau_sweep: TauSection::default(),
        output: OutputSection::default(),
    }
}

/// Logistic map from 0.1, 200 training pairs; locally periodic kernel.
fn logistic() -> ExperimentConfig {
    let mut train = base_train(MetricName::Rho, 100, 0.1, 0);
    train.batch_size = Some(100);
    train.clamp_lo = Some(vec![0.0, 0.0, 0.0, 0.05]);
    train.clamp_hi = Some(vec![10.0, 10.0, 10.0, 10.0]);
    ExperimentConfig {
        system: SystemConfig::Logistic,
        data: DataConfig {
            train_steps: 200,
            test_steps: 5000,
            tau: 1,
            initial: IcSpec::Float { values: vec![0.1] },
            test_initial: vec![IcSpec::Float { values: vec![0.4] }],
            observe: None,
            targets: None,
        },
        kernel: KernelConfig {
            mode: Mode::Raw,
            primitives: primitives(&[PrimitiveKind::LocallyPeriodic]),
            theta0: vec![1.0, 1.0, 1.0, 1.0],
        },
        train,
        tau_sweep: TauSection::default(),
        output: OutputSection::default(),
    }
}

/// Two-dimensional Henon map, 100 training pairs; one power-plus-Gaussian
/// kernel per component, full-dataset batches.
fn henon() -> ExperimentConfig {
    ExperimentConfig {
        system: SystemConfig::Henon { a: 1.4, b: 0.3 },
        data: DataConfig {
            train_steps: 100,
            test_steps: 5000,
            tau: 1,
            initial: IcSpec::Float {
                values: vec![0.9, -0.9],
            },
            test_initial: vec![IcSpec::Float {
                values: vec![-0.1, 0.1],
            }],
            observe: None,
            targets: None,
        },
        kernel: KernelConfig {
            mode: Mode::Raw,
            primitives: primitives(&[PrimitiveKind::PowerRational, PrimitiveKind::Gaussian]),
            theta0: vec![0.0, 1e-3, 0.0, 0.0, 1.0, 1.0],
        },
        train: base_train(MetricName::Rho, 1000, 0.1, 0),
        tau_sweep: TauSection::default(),
        output: OutputSection::default(),
    }
}

/// Henon observed through x only: windows of two consecutive x-values
/// predict both next-state components.
fn henon_partial() -> ExperimentConfig {
    ExperimentConfig {
        system: SystemConfig::Henon { a: 1.4, b: 0.3 },
        data: DataConfig {
            train_steps: 49,
            test_steps: 5000,
            tau: 2,
            initial: IcSpec::Float {
                values: vec![0.9, -0.766],
            },
            test_initial: vec![IcSpec::Float {
                values: vec![-0.83, 0.57],
            }],
            observe: Some(vec![0]),
            targets: Some(vec![0, 1]),
        },
        kernel: KernelConfig {
            mode: Mode::SquaredAmplitudes,
            primitives: primitives(&[
                PrimitiveKind::Triangular,
                PrimitiveKind::Gaussian,
                PrimitiveKind::Quadratic,
                PrimitiveKind::Laplace,
            ]),
            theta0: vec![1.0; 7],
        },
        train: base_train(MetricName::Rho, 5000, 0.1, 0),
        tau_sweep: TauSection::default(),
        output: OutputSection::default(),
    }
}

/// Lorenz flow at h = 0.01, 10,000 training pairs; batched training with the
/// final interpolant fitted on the last drawn batch.
fn lorenz() -> ExperimentConfig {
    let mut train = base_train(MetricName::Rho, 1000, 1.5, 1);
    train.batch_size = Some(100);
    train.clamp_lo = Some(vec![0.0, 1e-3, 1.0, 0.0, 0.05, 0.2]);
    train.clamp_hi = Some(vec![5.0, 5.0, 1.0, 4.0, 10.0, 20.0]);
    train.fit_on_last_batch = true;
    ExperimentConfig {
        system: SystemConfig::Lorenz {
            s: 10.0,
            r: 28.0,
            b: 10.0 / 3.0,
            h: 0.01,
        },
        data: DataConfig {
            train_steps: 10_000,
            test_steps: 50_000,
            tau: 1,
            initial: IcSpec::Float {
                values: vec![0.0, 1.0, 1.05],
            },
            test_initial: vec![IcSpec::Float {
                values: vec![0.5, 1.5, 2.5],
            }],
            observe: None,
            targets: None,
        },
        kernel: KernelConfig {
            mode: Mode::Raw,
            primitives: primitives(&[PrimitiveKind::PowerRational, PrimitiveKind::Gaussian]),
            theta0: vec![0.0, 1e-3, 1.0, 0.0, 1.0, 1.0],
        },
        train,
        tau_sweep: TauSection::default(),
        output: OutputSection::default(),
    }
}
