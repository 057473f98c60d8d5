use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An index (batch row, step, anchor) fell outside its valid range.
    #[error("{what} {index} out of range 1..={len}")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Residuals must be accumulated in scale order.
    #[error("residual for scale {got} cannot follow {completed} completed scales")]
    Sequencing { completed: usize, got: usize },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("{} configuration error(s): {}", .0.len(), join_errors(.0))]
    InvalidConfig(Vec<ConfigError>),

    #[error("weight file: {0}")]
    WeightFile(String),
}

fn join_errors(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn range(what: &'static str, index: usize, len: usize) -> Self {
        Error::Range { what, index, len }
    }
}
