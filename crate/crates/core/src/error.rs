use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IcmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IcmError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    /// A dataset invariant failed; the message names the invariant.
    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("kernel scaling failed: {0}")]
    Scaling(String),

    /// `E_n[h_n(Z)'X]` is singular or too ill-conditioned to invert.
    #[error(
        "identification failure: E_n[h'X] has condition number {cond:e} \
         (smallest singular value {min_singular:e})"
    )]
    Identification { cond: f64, min_singular: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("estimator infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported case: {0}")]
    Unsupported(String),

    #[error("bootstrap aborted: {failed} of {total} draws failed (limit 5%)")]
    Bootstrap { failed: usize, total: usize },

    #[error("eigenvalue diagnostic: {0}")]
    Diagnostic(String),

    #[error("oracle did not converge: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl IcmError {
    pub fn is_identification(&self) -> bool {
        matches!(self, IcmError::Identification { .. })
    }
}
