use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("impossible partition: {0}")]
    ImpossiblePartition(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("non-finite update at round {round}, client {client}, step {step}")]
    NonFinite {
        round: usize,
        client: usize,
        step: usize,
    },
    #[error("client {client} failed in round {round}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("step-size condition violated: {0}")]
    StepSize(String),
    #[error("schedule mismatch at round {round}: used {used}, expected {expected}")]
    ScheduleMismatch {
        round: usize,
        used: f64,
        expected: f64,
    },
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("diverged at round {round} (|w| = {norm:e})")]
    Diverged {
        round: usize,
        norm: f64,
        partial: Box<crate::training::RunResult>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("bad model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(expected: usize, actual: usize, context: &'static str) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context,
        }
    }
}
