//! Layout-conditioned multi-task diffusion at desk scale.

pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod eval;
pub mod layout;
pub mod nn;
pub mod numerics;
pub mod synthdata;

pub use error::{Error, Result};
