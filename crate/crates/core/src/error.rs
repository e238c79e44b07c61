use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("singular innovation covariance at step {step}")]
    SingularInnovation { step: usize },

    #[error("process noise covariance Q is singular at step {step} ({context}); the information filter needs Q > 0")]
    SingularProcessNoise { step: usize, context: String },

    #[error("measurement noise covariance R is singular at step {step}")]
    SingularMeasurementNoise { step: usize },

    #[error("state transition F is singular at step {step}")]
    SingularTransition { step: usize },

    #[error("two-filter fusion produced an indefinite precision at step {step}")]
    FusionFailure { step: usize },

    #[error("model {model} expects {expected} parameters, got {got}")]
    ParamArity {
        model: u8,
        expected: usize,
        got: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("invalid population size {0}, need at least 2")]
    InvalidPopulation(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("at bar {bar}: {source}")]
    AtBar {
        bar: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code convention of the command-line tool: 2 for usage or
    /// unsupported-model errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnsupportedModel(_) | Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::AtBar { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
