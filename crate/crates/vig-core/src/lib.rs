//! Compressed-video quality enhancement at desk scale.
//!
//! The crate implements a recurrent Compressed Redundancy Filtering network
//! that enhances the luma plane of compressed video, a Truth Guidance
//! Distillation pretraining strategy based on block-structured masks that mix
//! ground-truth and compressed pixels, the raw-video data pipeline, PSNR/SSIM
//! metrics, and a deterministic two-stage training loop.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tgd;
pub mod train;

pub use error::{Result, VigError};
