use thiserror::Error;

/// Errors surfaced by the library. Variants map one-to-one onto the failure
/// modes of the numerical pipeline so callers can react per kind.
#[derive(Debug, Error)]
pub enum KflowError {
    #[error("parameter vector has {got} slots, kernel expects {want}")]
    ParameterArity { want: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("Gram matrix not factorizable (last nugget {last_nugget:.3e}, residual {residual:.3e})")]
    SingularGram { last_nugget: f64, residual: f64 },

    #[error("quadratic-form denominator {0:.3e} is numerically zero")]
    ZeroDenominator(f64),

    #[error("series of length {len} too short (need at least {need})")]
    SeriesTooShort { len: usize, need: usize },

    #[error("no neighbor pair satisfies the separation constraints")]
    NoValidNeighbors,

    #[error("batch size {nb} invalid for dataset of size {n}")]
    BatchTooLarge { nb: usize, n: usize },

    #[error("two disjoint samples of size {m} need {need} points, dataset has {n}")]
    SampleTooLarge { m: usize, need: usize, n: usize },

    #[error("negative predictive variance {0:.3e} (kernel not positive definite)")]
    NegativeVariance(f64),

    #[error("training stalled: {0} consecutive skipped iterations")]
    TrainingStalled(usize),

    #[error("every finite-difference probe failed")]
    AllProbesFailed,

    #[error("model checksum mismatch: stored residual {stored:.3e}, recomputed {got:.3e}")]
    ChecksumMismatch { stored: f64, got: f64 },
}

pub type Result<T> = std::result::Result<T, KflowError>;
