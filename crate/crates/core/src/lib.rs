//! Localized, structure-preserving style editing with an autoencoder whose
//! spatial structure latent is sliced into per-region channel groups.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod latent;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
