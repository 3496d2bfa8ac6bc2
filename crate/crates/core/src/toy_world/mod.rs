//! Synthetic source videos with known motion, and the latent codec.

mod codec;
mod dataset;
mod render;
mod trajectory;

pub use codec::Codec;
pub use dataset::{build_dataset, Condition, Dataset, DatasetItem};
pub use render::{render_scene, render_video, AppearanceClass, ShapeKind, ToyVideo};
pub use trajectory::Trajectory;
