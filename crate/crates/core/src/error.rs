use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing gradient for `{0}`")]
    MissingGrad(String),

    #[error("memory accounting bug: {0}")]
    Accounting(String),

    #[error("scheduler error: {0}")]
    Scheduler(String),

    #[error("byte budget {budget} cannot fit batch 1 (needs {needed})")]
    Budget { budget: u64, needed: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
