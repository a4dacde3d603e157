use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input the math cannot handle, e.g. cosine distance against a zero vector.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("transport error: {0}")]
    Transport(String),

    /// A remote endpoint answered, but not in the expected shape.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("provider error at sample {sample_index}: {source}")]
    Provider {
        sample_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("prompt {prompt_id}: {source}")]
    Prompt {
        prompt_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("replay cache miss for key {0}")]
    CacheMiss(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code for the CLI: 2 usage, 3 provider, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Transport(_)
            | Error::Protocol(_)
            | Error::Provider { .. }
            | Error::CacheMiss(_) => 3,
            Error::Prompt { source, .. } => source.exit_code(),
            Error::Degenerate(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::TrainingDiverged { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 4,
        }
    }
}
