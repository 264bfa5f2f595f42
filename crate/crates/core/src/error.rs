use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("infeasible match specification: {0}")]
    Infeasible(String),

    #[error("no match with exactly {k} pairs exists (feasible range {k_min}..={k_max})")]
    InfeasiblePairCount { k: usize, k_min: usize, k_max: usize },

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("empty match")]
    EmptyMatch,

    #[error("missing potential outcomes in truth")]
    MissingPotentials,

    #[error("invalid response for {family} family at pair {pair}: {value}")]
    InvalidResponse {
        family: &'static str,
        pair: usize,
        value: f64,
    },

    #[error("{0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
