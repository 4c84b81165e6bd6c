//! CPU trainer for differentiable Gaussian splatting with a PDE-viscosity
//! position optimizer.
//!
//! Gaussian primitives are fit to images by gradient descent. Position
//! updates are routed through a voxel velocity field: each step deposits the
//! per-particle update into the grid (particle-to-grid), then blends the
//! stored voxel velocity back into the particle update (grid-to-particle).
//! The field acts as a viscous term that pulls every particle toward the
//! local average motion, suppressing the abrupt position changes that
//! small-scale Gaussians are prone to.
//!
//! Two rendering modes are supported: direct 2D image fitting (each splat is
//! the planar Gaussian density) and orthographic 3D, where each splat weight
//! is the closed-form line integral of the Gaussian along the pixel ray.
//!
//! The math kernels are generic over the scalar type via [`num::Real`];
//! everything above them runs at the crate-level alias [`F`] (`f64`).

pub mod analysis;
pub mod cli;
pub mod config;
pub mod core;
pub mod error;
pub mod field;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod num;
pub mod optimizer;
pub mod splat;
pub mod synth;

/// Scalar used by the trainer. The acceptance oracles need 1e-12-level
/// agreement, so everything above the generic kernels is pinned to f64.
pub type F = f64;
pub type Vec3 = nalgebra::Vector3<F>;
pub type Vec2 = nalgebra::Vector2<F>;
pub type Mat3 = nalgebra::Matrix3<F>;
pub type Mat2 = nalgebra::Matrix2<F>;

pub use error::{Error, Result};
