use std::path::PathBuf;

/// Shape of a matrix as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("row {row} of the attention mask has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("AUC is undefined: scores contain only one class")]
    AucUndefined,

    #[error("need at least {needed} patients per class for {folds} folds, found {found}")]
    TooFewPatients {
        needed: usize,
        folds: usize,
        found: usize,
    },

    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures decoding the on-disk dataset and checkpoint containers.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("config hash mismatch: file has {found}, expected {expected}")]
    ConfigHash { found: String, expected: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn dim(op: &'static str, left: Shape, right: Shape) -> Self {
        Error::Dimension { op, left, right }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
