use thiserror::Error;

/// Errors raised by the model, estimators and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("{func}: argument {value} is outside the domain ({reason})")]
    Domain {
        func: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("grid mismatch: expected {expected} points, got {got}")]
    GridMismatch { expected: usize, got: usize },

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(&'static str),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("infeasible dual control: {violations} of {nodes} nodes have a non-positive V2 argument ({:.4}%)", 100.0 * *violations as f64 / *nodes as f64)]
    InfeasibleDual { violations: usize, nodes: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InfeasibleDual { .. } => 3,
            Error::Calibration(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be finite",
        })
    }
}
