//! Unpaired CT↔MR translation with a cycle-consistent adversarial model
//! and an SSIM structure term, plus the evaluation metrics used to score it.

pub mod autograd;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
