use std::path::PathBuf;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Schema { context: String, message: String },
    #[error("duplicate title `{0}`")]
    DuplicateTitle(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("illegal edge {src:?} -> {dst:?} for relation {relation:?}")]
    IllegalEdge {
        src: crate::graph::NodeKind,
        dst: crate::graph::NodeKind,
        relation: crate::graph::Relation,
    },
    #[error("encoder: {0}")]
    Encoder(String),
    #[error("label: {0}")]
    Label(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Schema { .. } | Self::DuplicateTitle(_) | Self::Config(_) | Self::Io { .. } | Self::Checkpoint(_)
        )
    }
}
