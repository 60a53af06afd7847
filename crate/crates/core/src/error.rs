use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12")]
    ZeroVector,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("not a probability distribution (sum = {0})")]
    NotADistribution(f64),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid prototype count K = {0}")]
    InvalidK(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("k = {k} out of range for {n} tokens")]
    KOutOfRange { k: usize, n: usize },
    #[error("empty token selection")]
    EmptySelection,
    #[error("feature set has no labels")]
    MissingLabels,
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("workload of {0} items is below the 100-item minimum")]
    WorkloadTooSmall(usize),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated file")]
    TruncatedFile,
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(what: impl Into<String>) -> Error {
    Error::DimMismatch(what.into())
}
