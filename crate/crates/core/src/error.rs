use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("non-binary treatment at row {row} (column `{column}`, value `{value}`)")]
    NonBinaryTreatment {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-numeric cell at row {row}, column `{column}`: `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-finite value at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },

    #[error("empty data file {0}")]
    EmptyFile(PathBuf),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("treatment arm {arm} has {count} observations, need at least {needed}")]
    EmptyArm {
        arm: u8,
        count: usize,
        needed: usize,
    },

    #[error("IRLS did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NoConvergence {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error(
        "logistic coefficients diverged (max |coef| = {max_coef:.3e}); the treatment looks \
         perfectly separated, consider clipping or a regularized/kernel propensity model"
    )]
    Separation { max_coef: f64 },

    #[error("non-finite value in {0}")]
    NumericalFailure(String),

    #[error("rate diagnostic needs >= 2 distinct sample sizes, got {0}")]
    NeedTwoSizes(usize),

    #[error("bootstrap aborted: {failures} consecutive resamples contained a single treatment arm")]
    ResampleFailures { failures: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingColumn { .. } => "missing_column",
            Error::NonBinaryTreatment { .. } => "non_binary_treatment",
            Error::NonNumeric { .. } => "non_numeric",
            Error::NonFinite { .. } => "non_finite",
            Error::EmptyFile(_) => "empty_file",
            Error::Dimension { .. } => "dimension",
            Error::InvalidData(_) => "invalid_data",
            Error::InvalidConfig(_) => "invalid_config",
            Error::EmptyArm { .. } => "empty_arm",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Separation { .. } => "separation",
            Error::NumericalFailure(_) => "numerical_failure",
            Error::NeedTwoSizes(_) => "need_two_sizes",
            Error::ResampleFailures { .. } => "resample_failures",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by the user's input rather than by estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn { .. }
                | Error::NonBinaryTreatment { .. }
                | Error::NonNumeric { .. }
                | Error::NonFinite { .. }
                | Error::EmptyFile(_)
                | Error::InvalidData(_)
                | Error::InvalidConfig(_)
                | Error::Dimension { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
