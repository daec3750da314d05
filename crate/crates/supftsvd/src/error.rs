//! Error type shared across the crate, with CLI exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the kernel domain [0, 1] or a similar range check failed.
    #[error("domain error: {0}")]
    Domain(String),

    /// A kernel expansion collapsed to (numerically) the zero function.
    #[error("degenerate function: {0}")]
    DegenerateFunction(String),

    #[error("singular matrix in {context}")]
    SingularMatrix { context: String },

    #[error("rank-deficient system in {context} (condition number {condition:.3e})")]
    RankDeficient { context: String, condition: f64 },

    #[error("zero denominator in {0}")]
    ZeroDenominator(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no features pass the filter rule")]
    EmptyFilterResult,

    #[error("data format error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    DataFormat { line: Option<u64>, msg: String },

    /// Shape or identifier mismatch between inputs (validation failure).
    #[error("{0}")]
    Mismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical failure inside the EM loop, tagged with the iteration it occurred in.
    #[error("numerical failure at iteration {iteration}: {source}")]
    Numerical {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 2 usage/validation, 3 data-format, 4 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Domain(_)
            | Error::InsufficientData(_)
            | Error::EmptyFilterResult
            | Error::Mismatch(_)
            | Error::Config(_) => 2,
            Error::DataFormat { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::DegenerateFunction(_)
            | Error::SingularMatrix { .. }
            | Error::RankDeficient { .. }
            | Error::ZeroDenominator(_)
            | Error::Numerical { .. } => 4,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::Numerical {
            iteration,
            source: Box::new(self),
        }
    }
}
