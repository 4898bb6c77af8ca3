//! Discrete geodesic calculus on manifolds given implicitly, either
//! analytically, by a kernel barycenter over a point cloud, or by a learned
//! denoising projection.

pub mod denoise;
pub mod energy;
pub mod error;
pub mod harness;
pub mod manifold;
pub mod nn;
pub mod solver;

pub use error::{GeoError, Result};
