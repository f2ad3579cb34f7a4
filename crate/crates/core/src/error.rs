use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("sequence too long: tuple {tuple} encodes to {len} tokens (max {max})")]
    SequenceTooLong { tuple: String, len: usize, max: usize },

    #[error("invalid tuple: {0}")]
    InvalidTuple(String),

    #[error("{path}: {msg}")]
    Table { path: PathBuf, msg: String },

    #[error("nothing to mask")]
    NothingToMask,

    #[error("corruption plan does not match sequence: {0}")]
    PlanMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Wrong magic bytes; names the expected container kind.
    #[error("not an RPT {0}")]
    BadMagic(&'static str),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("attribute {0:?} not found")]
    MissingAttribute(String),

    #[error("no dictionary completion for {0:?}")]
    NoCompletion(String),

    #[error("no repair candidates for {0:?}")]
    NoCandidates(String),

    #[error("prompt has no mask slot: {0:?}")]
    MaskMissing(String),

    #[error("label {label:?} not found in text")]
    LabelNotFound { label: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
