//! Uniform sampling on images of convex bodies under measure-preserving
//! potential flows.
//!
//! The crate builds a volume-preserving map from a convex planar domain by
//! integrating the gradient of a harmonic extension, runs the BallWalk on the
//! image (or on any other [`geometry::Domain`]), and measures mixing,
//! conductance and isoperimetry empirically.

pub mod ballwalk;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod pde;
pub mod potential;
pub mod rng;

pub use error::{Error, Result};
