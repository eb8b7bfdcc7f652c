//! Missing-modality tolerant multi-modal segmentation.
//!
//! Each input channel has its own encoder; bottleneck and skip features of
//! the available channels are summed, so a missing channel simply contributes
//! nothing. Training drops one channel per step and pulls the bottleneck of
//! the dropped input toward the rescaled full-input bottleneck with a
//! discriminator. Prediction relevance is reported as the per-pixel weight of
//! evidence each channel contributes to each class.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod relevance;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
