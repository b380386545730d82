use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    /// A corpus or embeddings file cell could not be interpreted. `row` is the
    /// 1-based data row (the header is row 0).
    #[error("row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("malformed input: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("number of components k={k} must be between 1 and {max} (min(n, d))")]
    ComponentsOutOfRange { k: usize, max: usize },
    #[error("fold {fold} leaves {train_rows} training rows, fewer than required ({required})")]
    FoldTooSmall {
        fold: usize,
        train_rows: usize,
        required: usize,
    },
    #[error(
        "deviance explained threshold {threshold} unreachable: max achieved {max_explained:.6} at k={k_max}"
    )]
    ThresholdUnreachable {
        threshold: f64,
        max_explained: f64,
        k_max: usize,
    },
    #[error("column {column} has zero robust scale")]
    ConstantColumn { column: usize },
    #[error("need more rows than dimensions (n={n}, k={k})")]
    TooFewRows { n: usize, k: usize },
    #[error("no album has songs by both {a} and {b}")]
    NoCommonAlbums { a: String, b: String },
    #[error("training data needs both labels; found only label {0}")]
    SingleClass(u8),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
