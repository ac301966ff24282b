//! Robust morphable-model face fitting to depth scans, frontal re-rendering
//! and appearance-based gaze regression.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command-line front end live in the `facegaze` crate.
#![no_std]
#![deny(unsafe_code)]
// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod fitting;
pub mod model;
pub mod pipeline;
pub mod pointcloud;
pub mod regress;
pub mod render;
pub mod synth;

pub use error::{Error, Result};

/// 3D point or direction in meters.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix, mostly rotations.
pub type Mat3 = nalgebra::Matrix3<f64>;
