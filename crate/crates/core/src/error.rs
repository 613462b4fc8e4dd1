use thiserror::Error;

/// Every failure the kit can report. Variants map one-to-one onto the
/// error conditions documented on each operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at flat index {index}")]
    NonFiniteInput { index: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("empty output: {0}")]
    EmptyOutput(String),

    #[error("{heads} heads do not divide model width {d_model}")]
    HeadsDontDivide { heads: usize, d_model: usize },

    #[error("snake kernel needs an odd number of points, got {0}")]
    EvenK(usize),

    #[error("spatial dims {h}x{w} are not divisible by patch {ph}x{pw}")]
    IndivisibleSpatialDims { h: usize, w: usize, ph: usize, pw: usize },

    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("input {h}x{w} is not divisible by {factor}")]
    IndivisibleInput { h: usize, w: usize, factor: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("parameter name mismatch: {0}")]
    NameMismatch(String),

    #[error("mask grid {h}x{w} with ratio {ratio} selects {count} patches")]
    DegenerateGrid { h: usize, w: usize, ratio: f64, count: usize },

    #[error("mask selects no positions")]
    EmptyMask,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("metric needs at least one positive and one negative label")]
    SingleClass,

    #[error("metric needs at least one positive label")]
    NoPositives,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("unknown block kind `{0}`")]
    UnknownBlock(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
