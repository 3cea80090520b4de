use thiserror::Error;

/// Errors raised by tensor and tape operations.
///
/// Shape violations are programmer errors and panic via `assert!`; the
/// variants here are the conditions a caller can plausibly hit with
/// well-formed code on bad data.
#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("softmax of an empty vector is undefined")]
    EmptySoftmax,
    #[error("attention with every key masked out has no valid distribution")]
    AllKeysMasked,
    #[error("cosine similarity undefined for a zero-norm vector (norm={norm})")]
    ZeroNorm { norm: f64 },
    #[error("binary cross entropy undefined at probability {p} (must lie strictly inside (0,1))")]
    ProbOutOfDomain { p: f64 },
    #[error("layer norm of an empty vector is undefined")]
    EmptyLayerNorm,
    #[error("{context}: value is not finite")]
    NonFinite { context: String },
}
