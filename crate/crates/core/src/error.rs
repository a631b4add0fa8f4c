use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("riccati diverged after {iterations} iterations (last step {last_delta:e})")]
    RiccatiDiverged { iterations: usize, last_delta: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("empty reference")]
    EmptyReference,

    #[error("nonpositive gap: {0}")]
    NonpositiveGap(f64),

    #[error("recording exhausted for agent {agent} at tick {tick}")]
    RecordingExhausted { agent: String, tick: usize },

    #[error("unknown agent {0}")]
    UnknownAgent(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("overlapping column sets at column {0}")]
    OverlappingColumns(usize),

    #[error("window not ready: column {col} of row {row} still has k = {k}")]
    WindowNotReady { row: usize, col: usize, k: f64 },

    #[error("index out of range: ({row}, {col}) in {rows}x{cols} grid")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("trajectory too short: need at least {needed} states, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("empty distribution")]
    EmptyDistribution,

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing sub-score {0}")]
    MissingSubScore(String),

    #[error("non-PSD product: eigenvalue {0:e}")]
    NonPsdProduct(f64),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("planner failure: {0}")]
    Planner(String),

    #[error("agent model failure: {0}")]
    AgentModel(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (files, configs, parameters)
    /// rather than by a failure during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Schema { .. }
                | Error::Config(_)
                | Error::ModelFormat(_)
                | Error::Json(_)
                | Error::InsufficientPoints { .. }
        ) || matches!(self, Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound)
    }
}
