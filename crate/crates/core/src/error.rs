use thiserror::Error;

/// Errors raised by the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("length mismatch for {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite likelihood at step {step}")]
    NonFiniteLikelihood { step: usize },

    #[error("simulation fault at step {step}: log-odds {log_odds} left the representable range")]
    SimulationFault { step: usize, log_odds: f64 },

    #[error("variational fit diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse(_) | Error::Domain(_) | Error::LengthMismatch { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
