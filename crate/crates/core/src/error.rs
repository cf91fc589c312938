use thiserror::Error;

use crate::weights::WeightReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite gradient in parameter {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },

    #[error("non-finite density ratio: log p_model = {log_p_model}, log q_forward = {log_q_forward}")]
    NonFiniteDensity { log_p_model: f64, log_q_forward: f64 },

    #[error("non-finite loss at step {step} (t = {t})")]
    Diverged {
        step: usize,
        t: usize,
        report: Box<WeightReport>,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
