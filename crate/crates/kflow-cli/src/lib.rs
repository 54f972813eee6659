//! Command-line experiment harness around the kflow library: simulate the
//! benchmark systems, train kernels, evaluate surrogates, sweep embedding
//! delays, and export prediction envelopes, all driven by TOML configs or
//! built-in presets.

pub mod commands;
pub mod config;
pub mod presets;

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use config::{ConfigError, ExperimentConfig};
use kflow::KflowError;

/// Process exit code for an error: 2 for configuration problems (including
/// shape and sizing errors raised mid-run), 3 for non-finite numerics, 4 for
/// stalled training, 5 for model checksum mismatches, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<KflowError>() {
        Some(KflowError::NonFinite(_)) => 3,
        Some(KflowError::TrainingStalled(_)) => 4,
        Some(KflowError::ChecksumMismatch { .. }) => 5,
        Some(KflowError::DimensionMismatch(_))
        | Some(KflowError::SeriesTooShort { .. })
        | Some(KflowError::ParameterArity { .. })
        | Some(KflowError::BatchTooLarge { .. })
        | Some(KflowError::SampleTooLarge { .. }) => 2,
        _ => 1,
    }
}

/// Output directory for a run: the explicit one if configured, otherwise a
/// unique directory under runs/ so concurrent runs never collide.
pub fn resolve_out_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(dir) = &cfg.output.dir {
        return PathBuf::from(dir);
    }
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{command}-s{}-{nanos}", cfg.train.seed))
}
