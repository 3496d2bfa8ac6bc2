//! Training-free motion transfer for flow-matching video models, at desk
//! scale: toy videos, an analytic velocity field, latent-prediction guidance
//! and the metrics to judge it.

pub mod artifacts;
pub mod benchmark;
pub mod error;
pub mod field;
pub mod fmlt;
pub mod grid;
pub mod guidance;
pub mod metrics;
pub mod optim;
pub mod pgm;
pub mod pipeline;
pub mod regularization;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod toy_world;

pub use error::{Error, Result};
pub use tensor::{LatentTensor, Shape};
