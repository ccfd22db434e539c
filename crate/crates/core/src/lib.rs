//! Geometric-prior and contrastive-similarity losses for segmenting 3D
//! volumes from bounding-box annotations.

pub mod check;
pub mod commands;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod io;
pub mod kdtree;
pub mod metrics;
pub mod oracle;
pub mod pairwise;
pub mod pointcloud;
pub mod registration;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
