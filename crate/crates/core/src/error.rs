use std::path::PathBuf;

/// Errors raised anywhere in the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("row {row} has a near-zero norm ({norm:e}) and cannot be normalized")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::DegenerateRow { .. } => 3,
            _ => 2,
        }
    }
}
