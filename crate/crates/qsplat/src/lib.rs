//! CPU renderer for 3D Gaussian splatting scenes with four per-ray
//! integration strategies (dense volume rendering, quantile rendering,
//! top-K, stratified-K), a transmittance-space quadrature verifier, a
//! Gaussian voxelization pipeline, and a small feature-distillation loop
//! with analytic gradients.

pub mod bench;
pub mod distill;
pub mod error;
pub mod integrators;
pub mod io;
pub mod rasterizer;
pub mod scene;
pub mod synth;
pub mod theory;
pub mod voxel;

pub use error::{Error, Result};
