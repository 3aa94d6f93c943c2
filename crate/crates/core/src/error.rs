use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown tableau preset `{0}`")]
    UnknownPreset(String),

    #[error("partner tableau undefined: weight b[{index}] is zero")]
    ZeroWeight { index: usize },

    #[error("unsupported tableau: {0}")]
    UnsupportedTableau(String),

    #[error("tableau mismatch: {0}")]
    TableauMismatch(String),

    #[error("newton iteration did not converge at step {step} (residual {residual:e})")]
    NewtonDivergence { step: usize, residual: f64 },

    #[error("non-finite value encountered at step {step}")]
    NonFinite { step: usize },

    #[error("singular linear system at step {step}")]
    SingularStep { step: usize },

    #[error("singular matrix")]
    SingularMatrix,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cache does not belong to this trajectory")]
    CacheMismatch,

    #[error("observation time {time} is not a multiple of the step size {h}")]
    MisalignedObservation { time: f64, h: f64 },

    #[error("unsupported naive scheme for tableau `{0}`")]
    UnsupportedNaive(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("krylov breakdown after {iterations} iterations")]
    KrylovBreakdown { iterations: usize },

    #[error("optimization failed to converge: {0}")]
    NotConverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;
