use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure in {what} at particle {particle}, step {step}: value {value}")]
    NumericalFailure {
        what: &'static str,
        particle: usize,
        step: usize,
        value: f64,
    },

    #[error("{what} did not converge after {iterations} iterations (last distance {last})")]
    ConvergenceFailure {
        what: &'static str,
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("partial derivative validation failed for: {}", offending.join(", "))]
    ValidationFailure { offending: Vec<String> },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("optimizer iteration {iteration}: {source}")]
    AtIteration { iteration: usize, source: Box<Error> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Returns the value if finite, otherwise a numerical failure at the given location.
pub(crate) fn finite(what: &'static str, particle: usize, step: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericalFailure {
            what,
            particle,
            step,
            value,
        })
    }
}
