use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("dialog {dialog}: malformed field `{field}`: {reason}")]
    MalformedRecord {
        dialog: String,
        field: String,
        reason: String,
    },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("unknown slot `{0}`")]
    UnknownSlot(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("belief sequence missing end-of-value terminator for slot `{0}`")]
    MissingTerminator(String),

    #[error("empty input sequence")]
    EmptySequence,

    #[error("dialog {0} has no belief labels but teacher forcing was requested")]
    MissingLabel(String),

    #[error("posterior decoding requires the system response")]
    MissingResponse,

    #[error("prior decoding must not be given the system response")]
    UnexpectedResponse,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("enumeration bound exceeded: {needed} sequences > limit {limit}")]
    EnumerationBound { needed: u128, limit: u128 },

    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("schema mismatch, offending slots: {0:?}")]
    SchemaMismatch(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("adapter `{adapter}`: {reason}")]
    Adapter { adapter: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
