//! Dense tensors, a tape-based reverse-mode differentiator, the kernel set used
//! by the encoders and the denoiser, AdamW with warmup + cosine decay, and the
//! binary checkpoint format.

mod checkpoint;
mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{Grads, Graph, Var};
pub use optim::{cosine_lr, AdamW, AdamWConfig, OptimState};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{kernel}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Shape(String),
    #[error("{kernel} produced a non-finite value")]
    NonFinite { kernel: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph cycle: node {node} reads node {parent}, which was recorded after it")]
    Cycle { node: usize, parent: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
