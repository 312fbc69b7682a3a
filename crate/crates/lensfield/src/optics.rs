//! Thin-lens camera model and sampling.
//!
//! A camera here is a standard pinhole (intrinsics + pose) extended with
//! three lens parameters: aperture radius `a_R`, focal length `f`, and focus
//! distance `z_f`. With `a_R = 0` everything degenerates exactly to the
//! pinhole model. For a finite aperture, a pixel's rays originate on the
//! aperture disk and all pass through the pixel's focus point, which sits at
//! distance `z_f` along the pinhole ray.
//!
//! Aperture positions are drawn from a per-pixel scrambled 2D Sobol sequence
//! mapped through the concentric square-to-disk warp, so each pixel's sample
//! set stays low-discrepancy while neighboring pixels decorrelate.

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// Full thin-lens camera: pinhole intrinsics, rigid pose, lens parameters.
///
/// The pose maps camera space to world space; camera space is x-right,
/// y-down, z-forward (optical axis). All lengths are meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation.
    pub rotation: Mat3,
    /// Camera center in world coordinates (the lens center).
    pub translation: Vec3,
    /// Aperture radius `a_R` in meters. Zero is the pinhole limit.
    pub aperture_radius: f64,
    /// Focal length `f` in meters.
    pub focal_length: f64,
    /// Focus distance `z_f` in meters along the optical axis.
    pub focus_distance: f64,
}

impl Camera {
    /// Checks all camera invariants, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("camera image size must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::domain("camera focal scales fx, fy must be positive"));
        }
        if !(self.aperture_radius >= 0.0) {
            return Err(Error::domain(format!(
                "aperture radius must be >= 0, got {}",
                self.aperture_radius
            )));
        }
        if !(self.focal_length > 0.0) {
            return Err(Error::domain(format!(
                "focal length must be > 0, got {}",
                self.focal_length
            )));
        }
        if !(self.focus_distance > self.focal_length) {
            return Err(Error::domain(format!(
                "focus distance {} must exceed focal length {}",
                self.focus_distance, self.focal_length
            )));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Mat3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::domain(format!(
                "rotation is not orthonormal (max |R^T R - I| = {err:.3e})"
            )));
        }
        Ok(())
    }

    /// Optical axis direction in world frame (camera +z).
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation * Vec3::new(0.0, 0.0, 1.0)
    }

    /// Camera x axis (pixel-right) in world frame.
    pub fn right_axis(&self) -> Vec3 {
        self.rotation * Vec3::new(1.0, 0.0, 0.0)
    }

    /// Camera y axis (pixel-down) in world frame.
    pub fn down_axis(&self) -> Vec3 {
        self.rotation * Vec3::new(0.0, 1.0, 0.0)
    }

    /// Image-plane blur radius in pixels for a scene point at depth `z`,
    /// i.e. the circle of confusion converted from sensor meters via the
    /// pixel pitch implied by `fx` and the focal length.
    pub fn blur_radius_px(&self, z: f64) -> Result<f64> {
        Ok(circle_of_confusion(self, z)? * self.fx / self.focal_length)
    }
}

/// A ray with unit direction. `at(t)` walks `t` meters from the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// A point on the aperture together with its place in the pixel's sample set.
#[derive(Debug, Clone, Copy)]
pub struct ApertureSample {
    /// World-space point on the aperture disk (or ring).
    pub point: Vec3,
    /// Sample index within the pixel, `0 <= index < count`.
    pub index: usize,
    /// Samples per pixel.
    pub count: usize,
}

/// Near/far marching bounds along a ray, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayBounds {
    pub t_near: f64,
    pub t_far: f64,
}

impl RayBounds {
    pub fn new(t_near: f64, t_far: f64) -> Result<Self> {
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::domain(format!(
                "invalid ray bounds: need 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(RayBounds { t_near, t_far })
    }
}

/// Ray through the lens center and the continuous pixel position `px`
/// (pixel centers are at integer + 0.5), in the world frame.
pub fn pinhole_ray(camera: &Camera, px: (f64, f64)) -> Result<Ray> {
    let (x, y) = px;
    if !(x >= 0.0 && x <= camera.width as f64 && y >= 0.0 && y <= camera.height as f64) {
        return Err(Error::domain(format!(
            "pixel ({x}, {y}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let d_cam = Vec3::new((x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0);
    let dir = (camera.rotation * d_cam).normalize();
    Ok(Ray {
        origin: camera.translation,
        dir,
    })
}

/// Distance below which an aperture sample is considered coincident with the
/// focus point and the modified ray is degenerate.
pub const FOCUS_DEGENERACY_EPS: f64 = 1e-12;

/// Modified ray for aperture point `sample`: origin on the aperture,
/// direction through the focus point `o + d * z_f` of the base pinhole ray.
///
/// A sample exactly at the lens center returns `base` unchanged, so the
/// pinhole model is recovered bit-for-bit.
pub fn lens_ray(camera: &Camera, base: &Ray, sample: &ApertureSample) -> Result<Ray> {
    if sample.point == base.origin {
        return Ok(*base);
    }
    let focus_point = base.origin + base.dir * camera.focus_distance;
    let v = focus_point - sample.point;
    let norm = v.norm();
    if norm < FOCUS_DEGENERACY_EPS {
        return Err(Error::numeric(format!(
            "aperture sample coincides with the focus point (|P - a| = {norm:.3e})"
        )));
    }
    Ok(Ray {
        origin: sample.point,
        dir: v / norm,
    })
}

/// Blur-spot radius (circle of confusion) on the sensor, in meters, for a
/// scene point at depth `z` along the optical axis:
/// `a_R * |z - z_f| / z * f / (z_f - f)`.
pub fn circle_of_confusion(camera: &Camera, z: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::domain(format!("depth must be positive, got {z}")));
    }
    if !(camera.focus_distance > camera.focal_length) {
        return Err(Error::domain(
            "focus distance must exceed focal length for a real image",
        ));
    }
    let f = camera.focal_length;
    let zf = camera.focus_distance;
    Ok(camera.aperture_radius * ((z - zf).abs() / z) * (f / (zf - f)))
}

// ---------------------------------------------------------------------------
// Sobol sequence and hashing
// ---------------------------------------------------------------------------

/// SplitMix64: cheap, well-mixed 64-bit hash used for seeds and scrambles.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash a 64-bit value into a float in `[0, 1)`.
pub fn hash_to_unit(x: u64) -> f64 {
    (splitmix64(x) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Per-pixel RNG stream identifier: mixes a base seed with a pixel id so
/// every pixel gets an independent, reproducible scramble.
pub fn pixel_seed(base_seed: u64, pixel_id: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(pixel_id))
}

const SOBOL_BITS: u32 = 32;

/// Direction numbers for the second Sobol dimension (first is van der
/// Corput). Generated by the standard recurrence for the degree-1 primitive
/// polynomial: each vector is the previous one xored with itself shifted
/// right by one bit.
fn sobol_dim2_vectors() -> [u32; SOBOL_BITS as usize] {
    let mut v = [0u32; SOBOL_BITS as usize];
    v[0] = 1 << 31;
    for k in 1..SOBOL_BITS as usize {
        v[k] = v[k - 1] ^ (v[k - 1] >> 1);
    }
    v
}

/// Raw (integer) 2D Sobol sample in Gray-code order.
fn sobol_2d_bits(index: u64) -> (u32, u32) {
    assert!(index < (1u64 << 32), "sobol index exceeds 32-bit range");
    let gray = (index ^ (index >> 1)) as u32;
    let dim2 = sobol_dim2_vectors();
    let mut x = 0u32;
    let mut y = 0u32;
    for bit in 0..SOBOL_BITS {
        if (gray >> bit) & 1 == 1 {
            x ^= 1u32 << (31 - bit);
            y ^= dim2[bit as usize];
        }
    }
    (x, y)
}

fn bits_to_unit(bits: u32) -> f64 {
    bits as f64 * (1.0 / 4294967296.0)
}

/// `index`-th element of the 2D Sobol sequence (standard direction numbers,
/// Gray-code ordering), each coordinate in `[0, 1)`.
pub fn sobol_2d(index: u64) -> (f64, f64) {
    let (x, y) = sobol_2d_bits(index);
    (bits_to_unit(x), bits_to_unit(y))
}

/// Scrambled Sobol point: a random digit (xor) scramble per dimension keyed
/// by `seed`. Preserves the stratification of the base sequence.
pub fn sobol_2d_scrambled(index: u64, seed: u64) -> (f64, f64) {
    let (x, y) = sobol_2d_bits(index);
    let mask_x = (splitmix64(seed ^ 0x5bf0_3635_0aeb_7d11) >> 32) as u32;
    let mask_y = (splitmix64(seed ^ 0x93d7_65dd_3a8e_76c9) >> 32) as u32;
    (bits_to_unit(x ^ mask_x), bits_to_unit(y ^ mask_y))
}

/// Concentric (Shirley-Chiu) map from the unit square to the unit disk.
/// Low distortion, so it preserves the stratification of the input points.
pub fn concentric_square_to_disk(u: (f64, f64)) -> (f64, f64) {
    let ox = 2.0 * u.0 - 1.0;
    let oy = 2.0 * u.1 - 1.0;
    if ox == 0.0 && oy == 0.0 {
        return (0.0, 0.0);
    }
    let (r, theta) = if ox.abs() > oy.abs() {
        (ox, std::f64::consts::FRAC_PI_4 * (oy / ox))
    } else {
        (
            oy,
            std::f64::consts::FRAC_PI_2 - std::f64::consts::FRAC_PI_4 * (ox / oy),
        )
    };
    (r * theta.cos(), r * theta.sin())
}

/// `i`-th of `n` area-uniform aperture-disk samples for a pixel.
///
/// The point is a scrambled Sobol sample warped onto the disk of radius
/// `a_R` in the aperture plane (the plane through the lens center spanned by
/// the camera x/y axes). Deterministic in `(camera, pixel_seed, i, n)`.
pub fn sample_aperture_disk(
    camera: &Camera,
    pixel_seed: u64,
    i: usize,
    n: usize,
) -> ApertureSample {
    debug_assert!(i < n, "sample index out of range");
    let center = camera.translation;
    if camera.aperture_radius == 0.0 {
        return ApertureSample {
            point: center,
            index: i,
            count: n,
        };
    }
    let u = sobol_2d_scrambled(i as u64, pixel_seed);
    let (dx, dy) = concentric_square_to_disk(u);
    let offset =
        camera.right_axis() * (dx * camera.aperture_radius) + camera.down_axis() * (dy * camera.aperture_radius);
    ApertureSample {
        point: center + offset,
        index: i,
        count: n,
    }
}

/// `i`-th of `n` samples on the aperture *boundary*: radius exactly `a_R`,
/// angles jittered within `n` equal strata of `[0, 2pi)`.
pub fn sample_aperture_ring(
    camera: &Camera,
    pixel_seed: u64,
    i: usize,
    n: usize,
) -> Result<ApertureSample> {
    debug_assert!(i < n, "sample index out of range");
    if camera.aperture_radius == 0.0 {
        return Err(Error::domain(
            "aperture ring is undefined for a zero aperture radius",
        ));
    }
    let jitter = hash_to_unit(
        pixel_seed ^ 0xa1c9_e4b7_22d5_8f3d ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let theta = std::f64::consts::TAU * ((i as f64 + jitter) / n as f64);
    let offset = camera.right_axis() * (theta.cos() * camera.aperture_radius)
        + camera.down_axis() * (theta.sin() * camera.aperture_radius);
    Ok(ApertureSample {
        point: camera.translation + offset,
        index: i,
        count: n,
    })
}

/// Depth-stratum sample: places ray `i` of `n` inside its own sub-interval
/// of `[t_start, t_end)` so the per-pixel ray bundle covers each marching
/// step without z-aliasing.
pub fn stratified_t(i: usize, n: usize, t_start: f64, t_end: f64, jitter: f64) -> f64 {
    debug_assert!(i < n, "stratum index out of range");
    debug_assert!(t_start < t_end, "empty stratum interval");
    debug_assert!((0.0..1.0).contains(&jitter), "jitter must be in [0,1)");
    t_start + (t_end - t_start) * ((i as f64 + jitter) / n as f64)
}

/// Fractional offset of ray `i`'s quadrature comb within a marching step.
pub fn stratum_offset(i: usize, n: usize, jitter: f64) -> f64 {
    (i as f64 + jitter) / n as f64
}
