use std::path::PathBuf;

use thiserror::Error;

/// Which term of the training objective produced a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Predictive,
    Independence,
    Manifold,
    Baseline,
    Reconstruction,
    Kl,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossTerm::Predictive => "predictive",
            LossTerm::Independence => "independence",
            LossTerm::Manifold => "manifold",
            LossTerm::Baseline => "baseline",
            LossTerm::Reconstruction => "reconstruction",
            LossTerm::Kl => "kl",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("non-finite {term} loss{}", .detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        term: LossTerm,
        detail: Option<String>,
    },

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("requested {requested} components but data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of numerical origin (divergence, rank deficiency).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteInput(_) | Error::RankDeficient { .. }
        )
    }

    /// True for failures reading or writing artifacts.
    pub fn is_file_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated(_)
                | Error::Malformed(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
