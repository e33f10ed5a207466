//! Error type shared by every module of the crate.

use thiserror::Error;

/// Everything that can go wrong while building, running or persisting a model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("softmax over an empty axis")]
    EmptyAxis,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this graph")]
    GraphConsumed,

    #[error("function is not deterministic: baseline evaluations {first} and {second} differ")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("matching problem has {rows} ground-truth rows but only {cols} predictions")]
    TooManyTargets { rows: usize, cols: usize },

    #[error("brute-force matching is limited to {max} rows, got {rows}")]
    BruteForceTooLarge { rows: usize, max: usize },

    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("could not place {count} objects after {attempts} attempts")]
    Placement { count: usize, attempts: usize },

    #[error("attention map recording was not enabled for this forward pass")]
    RecordingDisabled,

    #[error("loss component `{component}` became non-finite at iteration {iteration}")]
    LossDiverged {
        component: &'static str,
        iteration: usize,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
