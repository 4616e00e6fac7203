use thiserror::Error;

/// Errors raised by fitting, imputation and I/O routines.
#[derive(Debug, Error)]
pub enum FiError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("matrix is singular at pivot {pivot} (pivot value {value:e}, max diagonal {max_diag:e})")]
    Singular {
        pivot: usize,
        value: f64,
        max_diag: f64,
    },

    #[error("matrix is singular (condition estimate {condition:e}): {context}")]
    IllConditioned { condition: f64, context: String },

    #[error("no convergence after {iterations} iterations: {diagnostic}")]
    NonConvergence {
        iterations: usize,
        diagnostic: String,
    },

    #[error("non-finite function value at evaluation point {0:?}")]
    Evaluation(Vec<f64>),

    #[error("weak instrument: |alpha| / se = {ratio:e} for column `{column}`")]
    WeakInstrument { column: String, ratio: f64 },

    #[error("all fractional weights vanish for recipient `{0}`")]
    DegenerateRecipient(String),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing column `{column}` in {path}")]
    MissingColumn { column: String, path: String },

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, FiError>;
