use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing {}: run `mimo-fm {stage}` first", path.display())]
    Prerequisite { stage: &'static str, path: PathBuf },

    #[error(transparent)]
    Core(#[from] mimo_fm::error::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 missing prerequisite,
    /// 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use mimo_fm::error::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Prerequisite { .. } => 3,
            Self::Core(
                E::Numerical(_) | E::NonFinite { .. } | E::Singular { .. } | E::Bisection(_),
            ) => 4,
            Self::Core(
                E::InvalidInput(_) | E::DimensionMismatch { .. } | E::UnknownAlgorithm(_),
            ) => 2,
            _ => 1,
        }
    }
}
