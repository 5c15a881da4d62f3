use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}` in input file")]
    MissingColumn(String),

    #[error("row {row}: non-numeric value `{value}` in column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: non-finite coordinate or observation")]
    NonFinite { row: usize },

    #[error("row {row}: duplicate coordinates (s1, s2, t) already seen at row {first_row}")]
    DuplicateCoordinates { row: usize, first_row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariate matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("singular neighbor covariance at ordered index {index} (jitter retry failed)")]
    SingularNeighborCovariance { index: usize },

    #[error("covariance matrix is not positive definite: pivot {pivot:.3e} at index {index} (lower bound on the smallest eigenvalue)")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("objective is not finite at initialization: {0}")]
    NonFiniteObjective(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Incompatible(String),
}
