use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid Q-format: {0} fractional bits is outside [-7, 31]")]
    InvalidQFormat(i32),

    #[error("shift {shift} out of range [0, 31] ({context})")]
    ShiftOutOfRange { shift: i64, context: String },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("format tag mismatch: expected {expected:?}, found {found:?}")]
    FormatTag { expected: String, found: String },

    #[error("truncated blob for layer {layer}: segment {offset}+{len} exceeds blob of {blob_len} bytes")]
    TruncatedBlob {
        layer: usize,
        offset: usize,
        len: usize,
        blob_len: usize,
    },

    #[error("blob has {actual} bytes but manifest describes {expected}")]
    BlobSize { expected: usize, actual: usize },

    #[error("overlapping blob segments at layer {layer}")]
    OverlappingSegments { layer: usize },

    #[error("bad dataset magic {0:?}")]
    DatasetMagic([u8; 4]),

    #[error("dataset length mismatch: header implies {expected} bytes, file has {actual}")]
    DatasetLength { expected: u64, actual: u64 },

    #[error("unknown dataset dtype {0}")]
    DatasetDtype(u8),

    #[error("empty calibration dataset")]
    EmptyDataset,

    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
