//! Feed-forward multi-view reconstruction of indoor scenes as 3D Gaussian
//! splats: plane-sweep depth, pixel-aligned lifting, incremental pixel-wise
//! fusion, weighted floater removal, tile rasterisation and depth-regularised
//! refinement.

pub mod commands;
pub mod config;
pub mod error;
pub mod finetune;
pub mod frame;
pub mod gaussians;
pub mod geometry;
pub mod matching;
pub mod pipeline;
pub mod ptf;
pub mod render;
pub mod scene_io;
pub mod wfr;

pub use error::{Error, Result};
