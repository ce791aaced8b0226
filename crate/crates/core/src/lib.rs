//! Deformable 3D image registration with spatially varying, biomechanics-informed
//! regularization.
//!
//! The toolkit optimizes a per-voxel displacement field `u` (or a stationary
//! velocity field integrated by scaling-and-squaring) so that a moving image
//! warped by `Φ(x) = x + u(x)` aligns with a fixed image, while three
//! solid-mechanics penalties shape the field region by region:
//!
//! - rigidity: sum of squared strain-tensor eigenvalues (= ‖S‖²_F),
//! - shearing: the same energy applied to displacements projected onto a
//!   local interface normal, leaving tangential sliding free,
//! - pseudo-elasticity: squared log of the Jacobian determinant.
//!
//! Regions carrying each penalty come from a label-derived regularization
//! mask, with interface normals estimated by local PCA. Synthetic benchmark
//! generators, evaluation metrics and a small binary volume format round out
//! the pipeline.

pub mod anatomy;
pub mod diffops;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod solver;
pub mod synthgen;
pub mod util;

mod error;

pub use error::{Error, Result};
pub use grid::{Dims, DisplacementField, ScalarVolume, Spacing, VectorField, VelocityField};
