use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so callers (notably the CLI) can map them onto exit
/// classes: input/validation problems, infeasible problem instances, and
/// exhausted iteration/evaluation budgets.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("no convergence after {iterations} iterations: {detail}")]
    NoConvergence { iterations: usize, detail: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }

    /// Exit class for CLI use: 1 validation/parse, 2 infeasibility, 3 budget
    /// or iteration exhaustion.
    pub fn exit_class(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) => 1,
            Error::Infeasible(_) => 2,
            Error::BudgetExceeded(_) | Error::NoConvergence { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
