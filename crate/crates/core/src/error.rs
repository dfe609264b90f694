use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}: no interactions found")]
    EmptyCorpus(PathBuf),

    #[error(
        "{k}-core filtering removed every interaction after {rounds} rounds \
         ({removed_users} users, {removed_items} items dropped)"
    )]
    EmptyAfterFilter {
        k: usize,
        rounds: usize,
        removed_users: usize,
        removed_items: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("vision-language endpoint unreachable for item {item}: {message}")]
    Transport { item: String, message: String },

    #[error("empty or unusable generation for item {item}: {message}")]
    Generation { item: String, message: String },

    #[error("text encoder unavailable: {0}")]
    Encoder(String),

    #[error("missing {what}; run `{command}` first")]
    MissingArtifact { what: String, command: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
