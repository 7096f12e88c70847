use std::path::{Path, PathBuf};

use bmr_core::BmrError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{}: {inner}", path.display())]
    InFile { path: PathBuf, inner: Box<CliError> },
    #[error("record `{id}`: {msg}")]
    Record { id: String, msg: String },
    /// Every violated setting, not just the first.
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] BmrError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        CliError::InFile {
            path: path.to_path_buf(),
            inner: Box::new(self),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
