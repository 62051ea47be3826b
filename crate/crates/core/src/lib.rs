//! Recursive octree autoencoder for binary voxel grids.
//!
//! Grids are split into octrees, encoded bottom-up into an 80-float latent
//! code, and decoded top-down with a node classifier that predicts where to
//! stop subdividing.

pub mod cli;
pub mod error;
pub mod metrics_eval;
pub mod model;
pub mod octree;
pub mod parallel;
pub mod tensor;
pub mod training;
pub mod voxel;

pub use error::{Error, Result};
