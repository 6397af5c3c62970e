use std::path::PathBuf;

/// Errors raised across the memory-policy pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("branch {branch}: {source}")]
    Branch {
        branch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures talking to an external agent process.
#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("timed out after {0:?} waiting for agent response")]
    Timeout(std::time::Duration),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("non-binary success value {0}")]
    NonBinary(i64),
    #[error("response id `{got}` does not match request id `{expected}`")]
    IdMismatch { expected: String, got: String },
    #[error("agent closed the connection")]
    Closed,
    #[error("transport: {0}")]
    Transport(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at_branch(self, branch: usize) -> Self {
        Error::Branch {
            branch,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }
}
