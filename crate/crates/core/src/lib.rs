//! Class-conditional diffusion augmentation and mixed real/synthetic
//! supervision for multi-label fluorescence image classification.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod pipeline;
pub mod schedulers;
pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
