//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("repeated backward without grad reset")]
    RepeatedBackward,
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("invalid distribution parameters: {0}")]
    InvalidDistribution(String),
    #[error("transform {op}: {message}")]
    Transform { op: &'static str, message: String },
    #[error("context {0}")]
    Context(String),
    #[error("mechanism: {0}")]
    Mechanism(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("cycle detected through nodes: {0}")]
    Cycle(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("observation incomplete, missing nodes: {0}")]
    IncompleteObservation(String),
    #[error("renderer: {0}")]
    Render(String),
    #[error("measurement: {0}")]
    Measure(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("intervention expression {expr:?}: {message}; grammar: <node>=<const> | <node>=+<delta> | <node>=f_<NODE>(eps)+<const>")]
    InterventionParse { expr: String, message: String },
    #[error("amortised-implicit mechanisms are declared for completeness but not constructible")]
    Unimplemented,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for usage/config mistakes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InterventionParse { .. } | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
