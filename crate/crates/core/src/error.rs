use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} sums to {sum}, expected 1")]
    NonStochastic { row: usize, sum: f64 },

    #[error("entry ({row}, {col}) is negative: {value}")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("chain is not ergodic")]
    NotErgodic,

    #[error("channel is rank one: no generalized eigenvector exists")]
    DegenerateChannel,

    #[error("second eigenvalue is zero: count statistic undefined")]
    SingularChannel,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} of size {size} exceeds cap {cap}")]
    SizeOverflow { what: &'static str, size: u128, cap: u128 },

    #[error("grouping failed at layer {layer}: component sizes {sizes:?}, expected {expected}")]
    GroupingFailure { layer: usize, sizes: Vec<usize>, expected: usize },

    #[error("query returned {0}, outside [0, 1]")]
    Range(f64),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn overflow(what: &'static str, size: u128, cap: u128) -> Self {
        Error::SizeOverflow { what, size, cap }
    }
}
