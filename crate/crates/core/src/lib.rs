//! Embedding, alignment and conditional diffusion restoration models.

pub mod checkpoint;
pub mod config;
mod conv;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod stage1;
pub mod stage2;
pub mod tokenizer;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use error::{CoreError, Result};
pub use params::ParamStore;
