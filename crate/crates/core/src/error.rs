use thiserror::Error;

pub type Result<T, E = CfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CfError {
    #[error("vector norm {norm:e} is below the zero-vector threshold")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("row {row} of {what} is not unit-norm (norm = {norm})")]
    NotUnit { what: &'static str, row: usize, norm: f64 },

    #[error("bad magic at byte offset {offset}: expected `CFE1`")]
    BadMagic { offset: u64 },

    #[error("header schema mismatch at byte offset {offset}: {reason}")]
    HeaderSchemaMismatch { offset: u64, reason: String },

    #[error("truncated payload at byte offset {offset}: needed {needed} more bytes")]
    TruncatedPayload { offset: u64, needed: u64 },

    #[error("non-finite float in field `{field}` at byte offset {offset}")]
    CorruptFloat { field: String, offset: u64 },

    #[error("unexpected CFE kind `{found}` (wanted {wanted})")]
    UnexpectedKind { wanted: &'static str, found: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("token weights sum to {total:e}; no support for the estimate")]
    EmptySupport { total: f64 },

    #[error("internal context pool needs at least one other batch record (image `{image_id}`)")]
    InsufficientBatch { image_id: String },

    #[error("cannot sample {m} contexts from a pool of {available}")]
    MTooLarge { m: usize, available: usize },

    #[error("no contexts supplied for intervention")]
    EmptyContexts,

    #[error("index {index} out of range (size {size})")]
    InvalidIndex { index: usize, size: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("group schema mismatch: {0}")]
    WrongGroupSchema(String),

    #[error("count table has zero total")]
    EmptyCounts,

    #[error("true and rival class are both {0}")]
    SameClass(usize),

    #[error("duplicate name `{0}`")]
    DuplicateName(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("unknown {kind} `{name}` (registered: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("reconstruction error {error:e} for `{image_id}` exceeds tolerance {tolerance:e}")]
    Reconstruction {
        image_id: String,
        error: f64,
        tolerance: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CfError {
    /// Errors caused by user-supplied parameters rather than by data.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            CfError::Config { .. } | CfError::UnknownStrategy { .. } | CfError::MTooLarge { .. }
        )
    }

    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        CfError::Config {
            field,
            reason: reason.into(),
        }
    }
}
