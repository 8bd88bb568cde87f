use thiserror::Error;

/// Errors surfaced by the research engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("duplicate entry for ({date}, {ticker})")]
    DuplicateRow { date: String, ticker: String },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate series for {0}: zero standard deviation")]
    DegenerateSeries(String),

    #[error("degenerate variance: return series is constant")]
    DegenerateVariance,

    #[error("insufficient data: need {need}, have {have}")]
    InsufficientData { need: usize, have: usize },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("stale trace: network was modified after the forward pass")]
    StaleTrace,

    #[error("non-finite gradient in {0}; update rejected")]
    NonFiniteGradient(String),

    #[error("invalid factor count {k}: only {n_valid} stocks available")]
    InvalidK { k: usize, n_valid: usize },

    #[error("dates misaligned: {0}")]
    MisalignedDates(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
