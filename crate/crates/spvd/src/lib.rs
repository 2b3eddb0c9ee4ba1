//! Sparse point-voxel diffusion for 3D point clouds.
//!
//! A desk-scale implementation of a dual-branch point/sparse-voxel diffusion
//! U-Net: DDPM/DDIM noise schedules and samplers, masked sampling for shape
//! completion and super-resolution, and the standard generative evaluation
//! metrics (Chamfer, EMD, 1-NNA, MMD, coverage).
//!
//! Inner loops (matrix products, pairwise distance matrices) run on rayon
//! with the default `parallel` feature; disabling it yields a bitwise
//! identical sequential build.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod net;
pub mod par;
pub mod real;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
