use thiserror::Error;

use crate::layout::LayoutError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Data { path: String, msg: String },
    #[error("training diverged at step {step} (stage {stage}): loss is not finite")]
    Diverged { step: u64, stage: u8 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn data(path: impl AsRef<std::path::Path>, msg: impl ToString) -> Error {
        Error::Data { path: path.as_ref().display().to_string(), msg: msg.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
