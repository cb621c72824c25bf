use thiserror::Error;
use tmpib_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical blow-up at step {step}: |u| = {value} at node {node}")]
    Stability {
        step: usize,
        node: usize,
        value: f64,
    },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} is undefined: {detail}")]
    Undefined { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty split `{0}`")]
    EmptySplit(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("case {case}: {source}")]
    Case {
        case: usize,
        #[source]
        source: Box<CoreError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn undefined(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Undefined {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by invalid user input rather than a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::Config(_) | Self::Contract(_) | Self::EmptySplit(_) => true,
            Self::Case { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
