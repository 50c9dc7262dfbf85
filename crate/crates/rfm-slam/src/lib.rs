//! Separated-estimation SLAM back-end for 2D feature maps.
//!
//! Range-bearing observations become feature-to-feature displacements that
//! constrain relative pose rotations linearly. Global headings come from an
//! on-manifold trust-region MLE over those constraints, after which every
//! robot and landmark position is recovered by one sparse weighted linear
//! least-squares solve. A deterministic simulator, a Gauss-Newton full-SLAM
//! baseline and an evaluation harness round out the crate.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod measurements;
pub mod orientation;
pub mod pipeline;
pub mod position;
pub mod rotation;
pub mod sim;
mod sparse;

pub use error::{Error, Result};
