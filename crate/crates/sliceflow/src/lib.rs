//! Slice interpolation for anisotropic CT volumes.
//!
//! A learned voxel-flow interpolator synthesizes intermediate axial slices
//! between consecutive CT slices. The model is pretrained on thin-slice
//! drop-middle triplets and fine-tuned unsupervised with cycle-consistency,
//! pseudo-supervised, and segmentation-attention losses. Classical nearest
//! neighbour and linear z-interpolation serve as comparison arms, and a small
//! slice-wise UNet measures the downstream segmentation effect.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability — phantom generation, pretraining, fine-tuning,
//! upsampling, evaluation, benchmarking, gradient checking — has one.

pub mod baselines;
pub mod commands;
pub mod error;
pub mod flownet;
pub mod metrics;
pub mod numerics;
pub mod phantom;
pub mod segmenter;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
