use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value; `field` is a dotted path into the config.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("no feasible action")]
    NoFeasibleAction,

    #[error("evaluator `{evaluator}` failed: {message}")]
    Evaluation { evaluator: String, message: String },

    #[error("external estimator unavailable: {0}")]
    EstimatorUnavailable(String),

    #[error("turn sequencing error: expected turn {expected}, got {got}")]
    Sequencing { expected: u32, got: u32 },

    #[error("incomplete trace `{scenario_id}`: {message}")]
    IncompleteTrace { scenario_id: String, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("inconsistent state: {0}")]
    InconsistentState(String),

    #[error("graph generation failed: {0}")]
    Generation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corpus synthesis failed: {0}")]
    Synthesis(String),

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn file(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::File {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
