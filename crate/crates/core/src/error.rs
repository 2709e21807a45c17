//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NespError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NespError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("degenerate spectral splitting: {0}")]
    DegenerateSplitting(String),
    #[error("singular equation: {0}")]
    Singular(String),
    #[error("integration failed at t = {t}: {msg}")]
    Integration { t: f64, msg: String },
    #[error("no contraction: {0}")]
    NoContraction(String),
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("orbit left the validity ball: {0}")]
    Radius(String),
    #[error("section crossing not found: {0}")]
    NoCrossing(String),
    #[error("no sign change: {0}")]
    NoBracket(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
}

impl NespError {
    /// Errors caused by user input rather than by a numerical failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            NespError::Dimension(_)
                | NespError::Parameter(_)
                | NespError::Parse { .. }
                | NespError::Model(_)
        )
    }
}
