//! NFN alignment scoring, LoRA placement, and training-dynamics experiments.

pub mod acceptance;
pub mod bundle;
pub mod commands;
pub mod error;
pub mod nfn;
pub mod placement;
pub mod report;
pub mod tensor;
pub mod theory;
pub mod transformer;

pub use error::{Error, Result};
