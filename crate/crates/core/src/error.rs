use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor belongs to a different tape")]
    DetachedTensor,
    #[error("odd spatial extent {h}x{w}; wavelet analysis needs even extents")]
    OddExtent { h: usize, w: usize },
    #[error("cannot chunk {channels} channels into {parts} equal parts")]
    ChunkError { channels: usize, parts: usize },
    #[error("token sequence of length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("grid mismatch: expected {expected:?}, found {found:?}")]
    GridMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unsupported file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("evaluation set contains no labeled pixels")]
    EmptyEvalSet,
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
