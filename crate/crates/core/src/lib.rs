//! Unsupervised semantic segmentation of grayscale tomography volumes.
//!
//! The pipeline has three stages:
//!
//! 1. [`pseudolabel`]: cluster voxel intensities into initial labels.
//! 2. [`selftrain::train_stage2`]: fit a segmentation network to them.
//! 3. [`selftrain::train_stage3`]: correct the labels with a confidence-masked
//!    student/teacher loop whose teacher tracks the student by EMA.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod pseudolabel;
pub mod segnet;
pub mod selftrain;
pub mod volume;

pub use error::{Error, Result};
