use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("condition `{condition}` uses unknown term `{term}`")]
    UnknownTerm { condition: String, term: String },

    #[error("{entity}: expected length {expected}, got {actual}")]
    LengthMismatch {
        entity: String,
        expected: usize,
        actual: usize,
    },

    #[error("{entity} references missing {reference}")]
    DanglingReference { entity: String, reference: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("collinear design columns: {}", format_groups(.groups))]
    Collinear { groups: Vec<Vec<String>> },

    #[error("term `{0}` is excluded from the design")]
    ExcludedTerm(String),

    #[error("{context}: only one class present")]
    SingleClass { context: String },

    #[error("{context}: class too small to stratify ({count} samples)")]
    ClassTooSmall { context: String, count: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsatisfiable frequency plan for term `{term}`: {reason}")]
    Unsatisfiable { term: String, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn format_groups(groups: &[Vec<String>]) -> String {
    groups
        .iter()
        .map(|g| format!("{{{}}}", g.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line surface: 3 for numerical
    /// failures, 2 for everything else (bad input, unreadable or unwritable
    /// paths).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Collinear { .. } => 3,
            _ => 2,
        }
    }
}
