use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("enumeration budget of {budget} trajectories exceeded")]
    EnumerationBudget { budget: usize },

    #[error("layout parse error at line {line}, column {column}: {message}")]
    LayoutParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("parameter `{id}`: {reason}")]
    ParamValue { id: String, reason: String },

    #[error("conflicting values for parameter `{0}` across messages")]
    ConflictingMessages(String),

    #[error("unknown message `{0}`")]
    UnknownMessage(String),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("search budget exceeded: {0} candidates (limit {1})")]
    SearchBudget(usize, usize),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("session error: {0}")]
    Session(#[from] crate::label_service::SessionError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
