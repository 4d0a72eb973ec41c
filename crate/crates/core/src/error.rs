//! Crate-wide error type.

/// Errors surfaced by the library.
///
/// Numerical failures are deliberately coarse: they signal either a contract
/// violation (shapes, config values) or a regime problem (step sizes too
/// large, ridge too small), not recoverable conditions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric (max deviation {max_dev:.3e})")]
    NotSymmetric { max_dev: f64 },

    /// Factorization failed even after jitter escalation. Usually means the
    /// ridge is too small or the kernel matrix is corrupted.
    #[error("matrix is not positive definite (jitter escalated to {max_jitter:.3e})")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("training diverged at step {step}")]
    DivergedTraining { step: usize },

    /// A latent update produced a non-finite value; step sizes are too large.
    #[error("non-finite latent update at step {step}")]
    NonFiniteUpdate { step: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model file: {0}")]
    InvalidModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
