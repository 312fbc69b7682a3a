//! Differentiable volumetric rendering with a finite-aperture (thin-lens)
//! camera model.
//!
//! The crate reconstructs a dense voxel radiance field from multi-view
//! images that contain defocus blur. Instead of the usual pinhole ray per
//! pixel, each pixel integrates over rays cast from the lens aperture that
//! converge at the pixel's focus point, so the blur is explained by the
//! camera model rather than baked into the scene. Aperture radius and focus
//! distance are optimized jointly with the field: the focus distance through
//! the reverse pass of the ray generation, the aperture radius through an
//! analytic boundary (ring) estimator.
//!
//! Module map:
//! - [`optics`]: thin-lens camera, ray generation, Sobol aperture sampling.
//! - [`field`]: dense voxel grid with trilinear interpolation and an
//!   occupancy grid for empty-space skipping.
//! - [`render`]: ray-marched forward rendering, aperture averaging, sRGB.
//! - [`grad`]: hand-derived reverse pass and finite-difference oracles.
//! - [`recon`]: batching, loss, Adam, and the reconstruction loop.
//! - [`scenegen`]: synthetic scene baking and dataset fabrication.
//! - [`metrics`]: PSNR / SSIM evaluation.
//! - [`io`]: camera files, checkpoints, PFM/PNG images, dataset manifests.
//! - [`cli`]: implementations behind the `lensfield` binary.

pub mod cli;
pub mod error;
pub mod field;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod optics;
pub mod plot;
pub mod recon;
pub mod render;
pub mod scenegen;

pub use error::{Error, Result};

/// World-space vector / point type used throughout.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Linear-space RGB triple.
pub type Rgb = nalgebra::Vector3<f64>;
/// 3x3 rotation matrix (camera-to-world).
pub type Mat3 = nalgebra::Matrix3<f64>;
