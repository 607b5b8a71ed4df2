//! Scale-aware text-prompted segmentation at desk scale: a phrase bank with a
//! frozen toy encoder, cosine retrieval of prompts from image features, the
//! text-injecting encoder blocks, losses, a synthetic lesion generator and a
//! training harness.

pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod saliency;
pub mod synthgen;
pub mod textbank;
pub mod train;

pub use error::{Error, Result};
pub use model::{ForwardOptions, ForwardOutput, StpnetConfig, StpnetModel, StpnetNet};
pub use train::{TrainConfig, TrainOutcome};
