use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {reason}")]
    Shape { op: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("non-finite loss at step {step} ({})", last_finite_text(.last_finite))]
    NonFiniteLoss {
        step: usize,
        last_finite: Option<f32>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn last_finite_text(v: &Option<f32>) -> String {
    match v {
        Some(l) => format!("last finite loss {l}"),
        None => "no finite loss before it".into(),
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Shape {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Errors raised while decoding the binary tile, mask and checkpoint formats.
///
/// Every variant carries the byte offset at which decoding stopped.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: [u8; 4],
        found: Vec<u8>,
    },

    #[error("truncated payload at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("{trailing} unexpected trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, trailing: usize },

    #[error("dimension overflow at byte {offset}: {reason}")]
    DimOverflow { offset: usize, reason: String },

    #[error("invalid mask value {value} at byte {offset}")]
    InvalidMaskValue { offset: usize, value: u8 },

    #[error("unsupported format version {found} at byte {offset} (expected {expected})")]
    VersionMismatch {
        offset: usize,
        expected: u16,
        found: u16,
    },

    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },

    #[error("parameter name mismatch at byte {offset}: expected {expected:?}, found {found:?}")]
    NameMismatch {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("shape mismatch for {name} at byte {offset}: expected {expected:?}, found {found:?}")]
    ParamShape {
        offset: usize,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}
