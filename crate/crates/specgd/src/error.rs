use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] specgd_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Stream(#[from] io::Error),
    #[error("block {block}: {reason}")]
    Corrupt { block: u64, reason: String },
    #[error("not a dataset file: {0}")]
    Format(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 I/O, 4 parse, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        use specgd_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Stream(_) | Error::Corrupt { .. } | Error::Format(_) => 3,
            Error::Parse { .. } => 4,
            Error::Core(c) => match c {
                C::Config(_) | C::Structural(_) | C::DimensionMismatch { .. } => 2,
                C::NonFinite { .. } | C::Numeric(_) | C::NoEstimate | C::StepFailure(_) => 5,
            },
        }
    }
}
