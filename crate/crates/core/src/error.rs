use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes. The CLI maps each to a distinct exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Transport,
    Capability,
    Data,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record `{id}`: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("unknown record id `{0}`")]
    UnknownId(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("few-shot pool has too few {side} examples: need {needed}, have {available}")]
    Balance {
        side: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("search token `{token}` collides with a gold answer of record `{id}`")]
    TokenCollision { token: String, id: String },

    #[error("transport error{}: {message}", record_context(.record_id))]
    Transport {
        record_id: Option<String>,
        message: String,
    },

    #[error(
        "endpoint returned no token log-probabilities{}; enable logprobs on the generation service",
        record_context(.record_id)
    )]
    Capability { record_id: Option<String> },

    #[error("malformed endpoint response{}: {message}", record_context(.record_id))]
    Protocol {
        record_id: Option<String>,
        message: String,
    },

    #[error("run aborted after {} completed record(s); failed on `{failed_id}`: {source}", done.len())]
    Aborted {
        done: Vec<String>,
        failed_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("mock service: {0}")]
    Startup(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn record_context(id: &Option<String>) -> String {
    match id {
        Some(id) => format!(" (record `{id}`)"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Template(_) | Error::Startup(_) => ErrorKind::Config,
            Error::Transport { .. } => ErrorKind::Transport,
            Error::Capability { .. } => ErrorKind::Capability,
            Error::Aborted { source, .. } => source.kind(),
            Error::Io { .. } => ErrorKind::Io,
            Error::MalformedLine { .. }
            | Error::InvalidRecord { .. }
            | Error::DuplicateId(_)
            | Error::UnknownId(_)
            | Error::Pairing(_)
            | Error::Balance { .. }
            | Error::Domain(_)
            | Error::UndefinedMetric(_)
            | Error::TokenCollision { .. }
            | Error::Protocol { .. }
            | Error::Json(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn with_record(self, id: &str) -> Self {
        let id = Some(id.to_string());
        match self {
            Error::Transport { message, .. } => Error::Transport {
                record_id: id,
                message,
            },
            Error::Capability { .. } => Error::Capability { record_id: id },
            Error::Protocol { message, .. } => Error::Protocol {
                record_id: id,
                message,
            },
            other => other,
        }
    }
}
