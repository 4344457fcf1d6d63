//! Hybrid mesh + 3D Gaussian head avatars on the CPU.
//!
//! The face is a skinned blend-shape mesh with a UV displacement map and a
//! disentangled latent texture decoded per pixel by a small MLP; hair is a cloud of
//! anisotropic 3D Gaussians deformed rigidly (ICP on the scalp) and non-rigidly (an
//! expression-conditioned MLP field). The two layers are composited with a near-z
//! occlusion test, early-stopped splat accumulation and a blurred occlusion mask.

// Index loops mirror the math in numeric kernels; `!(x > 0.0)` deliberately rejects NaN.
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity
)]

pub mod align;
pub mod avatar;
pub mod blend;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod micronet;
pub mod optim;
pub mod raster;
pub mod sampling;
pub mod splat;
pub mod synthetic;
pub mod texture;

pub use error::{Error, Result};
pub use geometry::{DisplacementMap, DisplacementModel, ExpressionParams, HeadModel, TriMesh};
pub use imaging::{ColorImage, MaskImage, ScalarImage};
pub use raster::{Camera, RasterBuffers, Vec3};
