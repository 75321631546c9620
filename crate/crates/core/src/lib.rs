//! Density-aware feature embedding for LiDAR point clouds.

pub mod augment;
pub mod cli;
pub mod density;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod report;
pub mod sensor;
pub mod sim;
pub mod stats;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};

/// Cartesian point in the sensor frame, meters.
pub type Point = [f64; 3];
