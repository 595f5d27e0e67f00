use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    /// The trajectory left the safety box around the state domain.
    #[error("trajectory escaped the safety box at t = {time}")]
    Escape { time: f64 },

    #[error("newton iteration did not converge after {iterations} iterations (defects: {trace:?})")]
    NoConvergence { iterations: usize, trace: Vec<f64> },

    /// Some finite-time exponent is too close to zero to separate E+ from E-.
    #[error("center direction detected: finite-time exponent {exponent} is within {gap_tol} of zero")]
    CenterDirection { exponent: f64, gap_tol: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Escape { .. } | Error::NoConvergence { .. } | Error::CenterDirection { .. }
        )
    }
}
