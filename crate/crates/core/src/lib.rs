//! Attention interaction alignment on a toy unified multimodal decoder.
//!
//! The crate measures how strongly image and text positions attend to each
//! other layer by layer, and trains a small decoder with a penalty that pulls
//! those per-layer intensities toward target bands.

pub mod aia;
pub mod dump;
mod error;
pub mod intensity;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use intensity::{AggregateProfile, IntensityProfile, ModalityRoles};
pub use model::{AttentionRecord, Checkpoint, Modality, ModelConfig, Task, TokenSequence};
pub use numerics::Tensor;
pub use train::{TrainConfig, RunLog};
