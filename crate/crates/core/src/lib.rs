//! Two-stage coarse-to-fine volumetric segmentation.
//!
//! A coarse U-Net segments a decimated volume; candidate boxes derived from
//! its mask crop the full-resolution volume for a fine U-Net; the two fine
//! masks and the upsampled coarse mask are fused by per-voxel majority vote.

pub mod boxes;
pub mod cascade;
pub mod cli;
pub mod config;
pub mod error;
pub mod losscore;
pub mod phantom;
pub mod tinynet;
pub mod volgrid;

pub use error::{Error, Result};
