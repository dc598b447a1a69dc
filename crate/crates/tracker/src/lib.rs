//! Two-stage 3D single-object tracker over lidar BEV features.
//!
//! Stage one extrapolates the target's motion from its recent box history
//! (a transformer over keypoint offsets). Stage two voxelizes the two most
//! recent point clouds, lets their BEV features interact, and iteratively
//! refines a dense motion map against a correlation volume before reading
//! out the final box. A synthetic-scene simulator, a one-pass evaluation
//! harness, and a small training loop make the whole pipeline testable on
//! a single desktop core.

pub mod bev;
pub mod bmp;
pub mod config;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod irm;
pub mod ope;
pub mod params;
pub mod pipeline;
pub mod rim;
pub mod sim;
pub mod train;
