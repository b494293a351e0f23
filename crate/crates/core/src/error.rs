//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("no data rows found")]
    EmptyData,

    #[error("column {name:?} has zero range (min = max = {value}); no affine map to [0, 1]")]
    DegenerateColumn { name: String, value: f64 },

    #[error("lag {lag} needs more than {rows} rows of history")]
    InsufficientHistory { lag: usize, rows: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("{players} players exceed the exact-enumeration guard of {guard}; use the sampled variant")]
    TooManyPlayers { players: usize, guard: usize },

    #[error("unsupported backend: {0}")]
    UnsupportedBackend(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ownership manifest error: {0}")]
    Manifest(String),

    #[error("window error: {0}")]
    Window(String),

    #[error("budget balance violated at step {t}: rewards sum to {rewards}, revenue is {revenue}")]
    BudgetBalance { t: usize, rewards: f64, revenue: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
