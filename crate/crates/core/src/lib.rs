//! Multi-contrast 3D lesion segmentation with sequence dropout.
//!
//! A U-Net style network over several MR channels is trained on lesion-biased
//! patches while whole channels are randomly replaced by zeros, so that at
//! deployment any subset of acquired sequences can be segmented by the same
//! model. Kernels, gradients and the optimizer are implemented here directly.

pub mod cli;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod sampler;
pub mod seqdrop;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use labels::{merge_masks, BinaryMask, LabelVolume};
pub use volume::{Dims, MultiChannelVolume, Volume};
