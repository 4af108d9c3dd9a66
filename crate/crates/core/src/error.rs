use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SentinelError>;

#[derive(Debug, Error)]
pub enum SentinelError {
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is indefinite (eigenvalue {0:e})")]
    IndefiniteMatrix(f64),
    #[error("class {0} has fewer than 2 samples")]
    ClassTooSmall(u32),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("length mismatch: {features} features vs {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("io failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("unsupported format or version: {0}")]
    FormatVersionMismatch(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("seed pool holds {available} entries, window needs {needed}")]
    SeedPoolTooSmall { available: usize, needed: usize },
    #[error("window holds {0} entries, need at least 2")]
    WindowTooSmall(usize),
    #[error("class id {0} is not in the reference model")]
    UnknownClassId(u32),
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("empty calibration stream")]
    EmptyStream,
    #[error("both benign and malicious samples are required")]
    MissingClass,
    #[error("class subset must not be empty")]
    InvalidSubset,
    #[error("could not place means with separation {0} after bounded retries")]
    SeparationInfeasible(f64),
    #[error("idealized flagging premise violated: {0}")]
    PremiseViolated(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
}

impl SentinelError {
    /// Stable variant name for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            SentinelError::EmptySampleSet => "empty_sample_set",
            SentinelError::DimensionMismatch { .. } => "dimension_mismatch",
            SentinelError::NotSymmetric(_) => "not_symmetric",
            SentinelError::IndefiniteMatrix(_) => "indefinite_matrix",
            SentinelError::ClassTooSmall(_) => "class_too_small",
            SentinelError::LabelOutOfRange { .. } => "label_out_of_range",
            SentinelError::LengthMismatch { .. } => "length_mismatch",
            SentinelError::IoFailure(_) => "io_failure",
            SentinelError::FormatVersionMismatch(_) => "format_version_mismatch",
            SentinelError::ChecksumMismatch { .. } => "checksum_mismatch",
            SentinelError::SeedPoolTooSmall { .. } => "seed_pool_too_small",
            SentinelError::WindowTooSmall(_) => "window_too_small",
            SentinelError::UnknownClassId(_) => "unknown_class_id",
            SentinelError::NotADistribution(_) => "not_a_distribution",
            SentinelError::EmptyStream => "empty_stream",
            SentinelError::MissingClass => "missing_class",
            SentinelError::InvalidSubset => "invalid_subset",
            SentinelError::SeparationInfeasible(_) => "separation_infeasible",
            SentinelError::PremiseViolated(_) => "premise_violated",
            SentinelError::InvalidArgument(_) => "invalid_argument",
            SentinelError::Config(_) => "config",
        }
    }

    /// Numeric failures vs. bad data, used by the CLI to pick an exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            SentinelError::NotSymmetric(_)
                | SentinelError::IndefiniteMatrix(_)
                | SentinelError::SeparationInfeasible(_)
                | SentinelError::PremiseViolated(_)
        )
    }
}
