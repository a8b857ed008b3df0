use std::path::PathBuf;

/// Everything that can go wrong inside the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"CBMB\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated blob `{name}`: needs bytes up to {end}, file has {available}")]
    Truncated {
        name: String,
        end: u64,
        available: u64,
    },

    #[error("directory overlap between `{first}` and `{second}`")]
    Overlap { first: String, second: String },

    #[error("non-finite payload in `{0}`")]
    NonFinite(String),

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm row {row} in {matrix}")]
    ZeroNorm { matrix: &'static str, row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite loss value")]
    NonFiniteLoss,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
