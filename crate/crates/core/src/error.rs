use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced in layer {layer}")]
    NumericFailure { layer: usize },

    #[error("step size underflow at t = {t} (stiffness failure)")]
    Stiffness { t: f64 },

    #[error("solver failed on protocol #{index} (i = {amplitude}, T_stim = {duration}): {source}")]
    Generation {
        index: usize,
        amplitude: f64,
        duration: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("truth channel {channel} of sample {sample} has zero norm")]
    DegenerateChannel { sample: usize, channel: usize },

    #[error("non-finite gradient for tensor `{0}`")]
    Optimizer(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        /// Parameters from the last epoch that completed with finite values.
        last_good: Option<Box<crate::fno::FnoParams>>,
    },

    #[error("no configuration within the budget window around {0} parameters")]
    InfeasibleBudget(usize),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

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
