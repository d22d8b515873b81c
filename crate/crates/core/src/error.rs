use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported padding ({pad_h}, {pad_w}) for a {height}x{width} input")]
    UnsupportedPadding {
        pad_h: usize,
        pad_w: usize,
        height: usize,
        width: usize,
    },

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised while decoding one of the on-disk formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("{format}: bad magic")]
    BadMagic { format: &'static str },

    #[error("{format}: truncated data (needed {needed} bytes, found {found})")]
    Truncated {
        format: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("{format}: {extra} unexpected trailing bytes")]
    TrailingBytes { format: &'static str, extra: usize },

    #[error("{format}: invalid dimensions {width}x{height}")]
    BadDimensions {
        format: &'static str,
        width: i64,
        height: i64,
    },

    #[error("{format}: non-finite value at element {index}")]
    NonFinite { format: &'static str, index: usize },

    #[error("ppm: unsupported maxval {0} (only 255 is accepted)")]
    BadMaxval(u32),

    #[error("{format}: malformed header: {reason}")]
    Header { format: &'static str, reason: String },

    #[error("weights: layer {layer} {role}: expected shape {expected:?}, found {found:?}")]
    WeightShape {
        layer: usize,
        role: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weights: {0}")]
    WeightRecord(String),

    #[error("network spec: {0}")]
    Spec(String),
}
