use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use kflow_cli::commands;
use kflow_cli::config::{
    apply_overrides, ConfigError, DataConfig, ExperimentConfig, IcSpec, KernelConfig, MetricName,
    OutputSection, SystemConfig, TauSection, TrainSection,
};
use kflow_cli::presets;

#[derive(Parser)]
#[command(
    name = "kflow",
    version,
    about = "Kernel surrogate models of chaotic dynamical systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset name (see --help for the list).
    #[arg(long)]
    preset: Option<String>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to a unique directory under runs/.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config field: --set train.iterations=10,
    /// --set kernel.theta0=[0,1,1,1]. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a trajectory CSV for the configured system.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// System name (bernoulli, logistic, henon, henon_scalar, lorenz)
        /// instead of a config file; uses that system's benchmark defaults.
        #[arg(long)]
        system: Option<String>,
        /// Initial condition, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        /// Number of map applications or integrator steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Integrator step size (Lorenz only).
        #[arg(long)]
        h: Option<f64>,
    },
    /// Train kernel parameters and persist the fitted model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved model: per-component one-step RMSE per test initial
    /// condition, teacher-forced differences, optional free rollout.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Saved model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Also write a free-running rollout of this many steps.
        #[arg(long)]
        rollout: Option<usize>,
    },
    /// Sweep embedding delays: alignment energies and a trained RMSE curve.
    Tau {
        #[command(flatten)]
        common: Common,
    },
    /// Export predictions with error half-widths along a test series.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        /// Saved model JSON.
        #[arg(long)]
        model: PathBuf,
    },
}

fn resolve_base(common: &Common) -> anyhow::Result<ExperimentConfig> {
    match (&common.preset, &common.config) {
        (Some(_), Some(_)) => {
            Err(ConfigError("give either --preset or --config, not both".into()).into())
        }
        (Some(name), None) => Ok(presets::preset(name).ok_or_else(|| {
            ConfigError(format!(
                "unknown preset {name:?} (available: {})",
                presets::PRESET_NAMES.join(", ")
            ))
        })?),
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("read {}: {e}", path.display())))?;
            Ok(ExperimentConfig::from_toml(&text)?)
        }
        (None, None) => Err(ConfigError("need --preset or --config".into()).into()),
    }
}

fn resolve_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let base = resolve_base(common)?;
    finish_config(base, common)
}

fn finish_config(base: ExperimentConfig, common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = apply_overrides(&base, &common.set)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = Some(out.display().to_string());
    }
    Ok(cfg)
}

/// A minimal config for ad-hoc simulation of a named system.
fn adhoc_config(system: &str) -> anyhow::Result<ExperimentConfig> {
    let (system, initial) = match system {
        "bernoulli" => (
            SystemConfig::Bernoulli,
            IcSpec::PiFraction { num: 1, den: 10 },
        ),
        "logistic" => (SystemConfig::Logistic, IcSpec::Float { values: vec![0.1] }),
        "henon" => (
            SystemConfig::Henon { a: 1.4, b: 0.3 },
            IcSpec::Float {
                values: vec![0.9, -0.9],
            },
        ),
        "henon_scalar" | "henon-scalar" => (
            SystemConfig::HenonScalar { a: 1.4, b: 0.3 },
            IcSpec::Float {
                values: vec![0.9, -3.0],
            },
        ),
        "lorenz" => (
            SystemConfig::Lorenz {
                s: 10.0,
                r: 28.0,
                b: 10.0 / 3.0,
                h: 0.01,
            },
            IcSpec::Float {
                values: vec![0.0, 1.0, 1.05],
            },
        ),
        other => return Err(ConfigError(format!("unknown system {other:?}")).into()),
    };
    Ok(ExperimentConfig {
        system,
        data: DataConfig {
            train_steps: 100,
            test_steps: 0,
            tau: 1,
            initial,
            test_initial: Vec::new(),
            observe: None,
            targets: None,
        },
        kernel: KernelConfig {
            mode: kflow::kernels::Mode::Raw,
            primitives: vec![kflow::kernels::Primitive::new(
                kflow::kernels::PrimitiveKind::Gaussian,
            )],
            theta0: vec![1.0, 1.0],
        },
        train: TrainSection {
            metric: MetricName::Rho,
            iterations: 0,
            step_size: 0.1,
            batch_size: None,
            mmd_sample_size: 100,
            seed: 0,
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
        },
        tau_sweep: TauSection::default(),
        output: OutputSection::default(),
    })
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Simulate {
            common,
            system,
            x0,
            steps,
            h,
        } => {
            let base = match &system {
                Some(name) => {
                    if common.preset.is_some() || common.config.is_some() {
                        return Err(ConfigError(
                            "--system replaces --preset/--config; give only one".into(),
                        )
                        .into());
                    }
                    adhoc_config(name)?
                }
                None => resolve_base(&common).map_err(|e| {
                    match e.downcast_ref::<ConfigError>() {
                        Some(c) if c.0 == "need --preset or --config" => {
                            ConfigError("need --system, --preset, or --config".into()).into()
                        }
                        _ => e,
                    }
                })?,
            };
            let mut cfg = finish_config(base, &common)?;
            if let Some(steps) = steps {
                cfg.data.train_steps = steps;
            }
            if let Some(values) = x0 {
                cfg.data.initial = IcSpec::Float { values };
                cfg.validate()?;
            }
            if let Some(h) = h {
                match &mut cfg.system {
                    SystemConfig::Lorenz { h: hh, .. } => *hh = h,
                    _ => {
                        return Err(
                            ConfigError("--h only applies to the lorenz system".into()).into()
                        )
                    }
                }
            }
            let out = kflow_cli::resolve_out_dir(&cfg, "simulate");
            commands::cmd_simulate(&cfg, &out)?;
        }
        Cmd::Train { common } => {
            let cfg = resolve_config(&common)?;
            let out = kflow_cli::resolve_out_dir(&cfg, "train");
            commands::cmd_train(&cfg, &out)?;
        }
        Cmd::Eval {
            common,
            model,
            rollout,
        } => {
            let cfg = resolve_config(&common)?;
            let out = kflow_cli::resolve_out_dir(&cfg, "eval");
            commands::cmd_eval(&cfg, &model, rollout, &out)?;
        }
        Cmd::Tau { common } => {
            let cfg = resolve_config(&common)?;
            let out = kflow_cli::resolve_out_dir(&cfg, "tau");
            commands::cmd_tau(&cfg, &out)?;
        }
        Cmd::Uncertainty { common, model } => {
            let cfg = resolve_config(&common)?;
            let out = kflow_cli::resolve_out_dir(&cfg, "uncertainty");
            commands::cmd_uncertainty(&cfg, &model, &out)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(kflow_cli::exit_code(&e));
    }
}
