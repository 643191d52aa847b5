use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("invalid tensor shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached: it does not depend on any parameter of this graph")]
    DetachedLoss,

    #[error("operands belong to different graphs")]
    GraphMismatch,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("incompatible configuration: {0}")]
    Compatibility(String),

    #[error("missing rate {0} is outside [0, 1]")]
    InvalidRate(f64),

    #[error("multi-modality scenario needs at least one missing modality")]
    EmptyMissingSet,

    #[error("unknown modality index {index} (model has {count} modalities)")]
    UnknownModality { index: usize, count: usize },

    #[error("layer index {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("noise intensity must be non-negative, got {0}")]
    NegativeNoise(f64),

    #[error("block positions were not recorded for this sequence")]
    MissingBlockPositions,

    #[error("pretraining did not converge: held-out accuracy {accuracy:.4} < {threshold:.4}")]
    NonConvergence { accuracy: f64, threshold: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: {snapshot}")]
    Diverged {
        epoch: usize,
        step: usize,
        snapshot: String,
    },

    #[error("scenario list is empty")]
    EmptyScenarios,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("results table: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
