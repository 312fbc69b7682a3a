//! Forward rendering.
//!
//! A ray is rendered by marching a fixed-step quadrature comb through the
//! field and alpha-compositing the samples front to back. A pixel is the
//! linear-space average of the rays cast from its aperture samples; with a
//! zero aperture radius the pixel collapses to the single pinhole ray,
//! bit-for-bit.
//!
//! The quadrature comb is anchored at the configured near bound, not at the
//! per-ray box entry, so sample positions along a ray do not move when the
//! ray direction changes. The backward pass relies on this: gradients flow
//! through sample positions only via the ray origin and direction.
//!
//! Each of a pixel's `n` rays offsets its comb by `(i + jitter)/n` steps, so
//! the bundle stratifies every marching interval and z-aliasing averages
//! out.

use crate::error::{Error, Result};
use crate::field::{OccupancyGrid, VoxelField};
use crate::optics::{
    hash_to_unit, lens_ray, pinhole_ray, pixel_seed, sample_aperture_disk, sample_aperture_ring,
    stratum_offset, ApertureSample, Ray, RayBounds,
};
use crate::{Rgb, Vec3};
use rayon::prelude::*;

/// Default transmittance below which marching terminates early.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

const JITTER_SALT: u64 = 0x6a17_7e2b_90c3_44d5;

/// How many rays per pixel, how finely to march, and what lies behind the
/// scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Aperture rays per pixel.
    pub rays_per_pixel: usize,
    /// Marching step in meters.
    pub step_size: f64,
    /// Global near/far marching bounds.
    pub bounds: RayBounds,
    /// Cap on evaluated field samples per ray.
    pub max_samples_per_ray: usize,
    /// Linear-space background color composited behind the field.
    pub background: Rgb,
    /// Skip samples in cells the occupancy grid marks empty.
    pub use_occupancy: bool,
    /// Stop marching once transmittance drops below this. Gradient checks
    /// shrink it so finite differences never straddle a truncation flip.
    pub min_transmittance: f64,
    /// Base seed; every pixel derives its own sample stream from it.
    pub seed: u64,
    /// Render pixels sequentially (bitwise-reproducible reference mode).
    pub serial: bool,
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_pixel == 0 {
            return Err(Error::domain("rays_per_pixel must be >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::domain("step_size must be positive"));
        }
        if self.max_samples_per_ray == 0 {
            return Err(Error::domain("max_samples_per_ray must be >= 1"));
        }
        RayBounds::new(self.bounds.t_near, self.bounds.t_far).map(|_| ())
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            rays_per_pixel: 4,
            step_size: 4e-3,
            bounds: RayBounds {
                t_near: 1e-3,
                t_far: 10.0,
            },
            max_samples_per_ray: 1024,
            background: Rgb::zeros(),
            use_occupancy: false,
            min_transmittance: TRANSMITTANCE_EPS,
            seed: 0,
            serial: false,
        }
    }
}

/// One quadrature record: everything the backward pass needs to replay the
/// sample.
#[derive(Debug, Clone, Copy)]
pub struct TapeRecord {
    pub t: f64,
    pub position: Vec3,
    pub sigma: f64,
    pub color: Rgb,
    pub alpha: f64,
    /// Transmittance *before* this sample; 1 at the first record.
    pub trans: f64,
}

/// Quadrature tape of one marched ray.
#[derive(Debug, Clone, Default)]
pub struct RayTape {
    pub samples: Vec<TapeRecord>,
    /// Marching step; every sample covers one full step.
    pub step: f64,
    pub background: Rgb,
    /// Field parameter version the tape was recorded against.
    pub field_version: u64,
}

/// Linear color and accumulated opacity of a rendered ray or pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelColor {
    pub rgb: Rgb,
    pub alpha: f64,
}

/// Tape of one aperture ray, with the geometry needed to chain gradients
/// back into the lens parameters.
#[derive(Debug, Clone)]
pub struct PixelRayTape {
    pub tape: RayTape,
    /// The marched ray (origin on the aperture for lens pixels).
    pub ray: Ray,
    pub aperture: ApertureSample,
    /// The pinhole ray through the pixel center that this ray was built from.
    pub base: Ray,
    pub color: Rgb,
    pub alpha: f64,
}

/// Full per-pixel record: every ray tape plus the averaged color.
#[derive(Debug, Clone)]
pub struct PixelTape {
    pub rays: Vec<PixelRayTape>,
    pub color: Rgb,
    pub alpha: f64,
    pub pixel_seed: u64,
}

/// Marches one ray through the field.
///
/// `stratum = (i, n)` indexes this ray within its pixel's bundle and
/// `jitter` is the pixel's shared comb offset. Returns the composited linear
/// color and accumulated opacity; appends quadrature records to `tape` when
/// given.
pub fn render_ray(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    ray: &Ray,
    cfg: &RenderConfig,
    stratum: (usize, usize),
    jitter: f64,
    mut tape: Option<&mut RayTape>,
) -> Result<PixelColor> {
    let (i, n) = stratum;
    let offset = stratum_offset(i, n, jitter);
    let step = cfg.step_size;

    if let Some(t) = tape.as_deref_mut() {
        t.samples.clear();
        t.step = step;
        t.background = cfg.background;
        t.field_version = field.version();
    }

    // Marching only the bbox window is an optimization, not a semantic: the
    // field is zero outside, every sample covers a full step, and the comb
    // stays anchored at t_near, so this equals marching the whole range.
    let range = field.bbox.ray_range(&ray.origin, &ray.dir);
    let (t_lo, t_hi) = match range {
        Some((a, b)) => (a.max(cfg.bounds.t_near), b.min(cfg.bounds.t_far)),
        None => (1.0, 0.0),
    };
    if t_lo >= t_hi {
        return Ok(PixelColor {
            rgb: cfg.background,
            alpha: 0.0,
        });
    }

    // First comb index with t >= t_lo; the comb is anchored at t_near.
    let k0 = (((t_lo - cfg.bounds.t_near) / step - offset).ceil()).max(0.0) as u64;

    let mut trans = 1.0;
    let mut rgb = Rgb::zeros();
    let mut alpha_acc = 0.0;
    let mut evaluated = 0usize;
    let mut k = k0;
    loop {
        let t = cfg.bounds.t_near + (k as f64 + offset) * step;
        if t >= t_hi || evaluated >= cfg.max_samples_per_ray {
            break;
        }
        k += 1;
        let position = ray.at(t);
        if let Some(occ) = occupancy {
            if !occ.is_occupied(&position) {
                continue;
            }
        }
        let sample = field.query(&position)?;
        if !sample.sigma.is_finite()
            || !(sample.color.x.is_finite() && sample.color.y.is_finite() && sample.color.z.is_finite())
        {
            return Err(Error::numeric(format!(
                "non-finite field output at sample position {position:?} (t = {t})"
            )));
        }
        let alpha = 1.0 - (-sample.sigma * step).exp();
        if let Some(tp) = tape.as_deref_mut() {
            tp.samples.push(TapeRecord {
                t,
                position,
                sigma: sample.sigma,
                color: sample.color,
                alpha,
                trans,
            });
        }
        rgb += sample.color * (trans * alpha);
        alpha_acc += trans * alpha;
        trans *= 1.0 - alpha;
        evaluated += 1;
        if trans < cfg.min_transmittance {
            break;
        }
    }
    rgb += cfg.background * (1.0 - alpha_acc);
    Ok(PixelColor {
        rgb,
        alpha: alpha_acc,
    })
}

/// Per-pixel comb jitter, shared by all rays of the pixel.
pub fn pixel_jitter(px_seed: u64) -> f64 {
    hash_to_unit(px_seed ^ JITTER_SALT)
}

/// Seed for the sample streams of pixel `(x, y)`.
pub fn seed_for_pixel(cfg: &RenderConfig, camera_width: u32, x: u32, y: u32) -> u64 {
    pixel_seed(cfg.seed, (y as u64) * camera_width as u64 + x as u64)
}

/// Renders a pixel through the pinhole model: one ray through the pixel
/// center, no aperture machinery.
pub fn render_pixel_pinhole(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    camera: &crate::optics::Camera,
    px: (u32, u32),
    cfg: &RenderConfig,
    tape: Option<&mut RayTape>,
) -> Result<PixelColor> {
    let seed = seed_for_pixel(cfg, camera.width, px.0, px.1);
    let base = pinhole_ray(camera, (px.0 as f64 + 0.5, px.1 as f64 + 0.5))?;
    render_ray(
        field,
        occupancy,
        &base,
        cfg,
        (0, 1),
        pixel_jitter(seed),
        tape,
    )
}

enum AperturePattern {
    Disk,
    Ring,
}

fn render_pixel_inner(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    camera: &crate::optics::Camera,
    px: (u32, u32),
    cfg: &RenderConfig,
    pattern: AperturePattern,
    want_tape: bool,
) -> Result<(PixelColor, Option<PixelTape>)> {
    let seed = seed_for_pixel(cfg, camera.width, px.0, px.1);
    let jitter = pixel_jitter(seed);
    let base = pinhole_ray(camera, (px.0 as f64 + 0.5, px.1 as f64 + 0.5))?;

    if camera.aperture_radius == 0.0 {
        if let AperturePattern::Ring = pattern {
            return Err(Error::domain(
                "ring rendering requires a positive aperture radius",
            ));
        }
        // Degenerate aperture: exactly the pinhole code path.
        let mut tape = want_tape.then(RayTape::default);
        let color = render_ray(field, occupancy, &base, cfg, (0, 1), jitter, tape.as_mut())?;
        let pixel_tape = tape.map(|t| PixelTape {
            rays: vec![PixelRayTape {
                tape: t,
                ray: base,
                aperture: ApertureSample {
                    point: base.origin,
                    index: 0,
                    count: 1,
                },
                base,
                color: color.rgb,
                alpha: color.alpha,
            }],
            color: color.rgb,
            alpha: color.alpha,
            pixel_seed: seed,
        });
        return Ok((color, pixel_tape));
    }

    let n = cfg.rays_per_pixel;
    let mut sum_rgb = Rgb::zeros();
    let mut sum_alpha = 0.0;
    let mut rays = want_tape.then(|| Vec::with_capacity(n));
    for i in 0..n {
        // Skip (practically unreachable) samples that coincide with the
        // focus point by redrawing further along the sequence.
        let mut attempt = 0usize;
        let (sample, ray) = loop {
            let sample = match pattern {
                AperturePattern::Disk => {
                    sample_aperture_disk(camera, seed, i + attempt * n, (attempt + 1) * n)
                }
                AperturePattern::Ring => {
                    // Boundary sample at the *same angle* as the pixel's
                    // i-th disk sample: the ring and disk renders then
                    // differ only radially, which is what makes their
                    // difference usable in the aperture-radius gradient.
                    let disk =
                        sample_aperture_disk(camera, seed, i + attempt * n, (attempt + 1) * n);
                    let offset = disk.point - camera.translation;
                    let r = offset.norm();
                    if r > camera.aperture_radius * 1e-9 {
                        ApertureSample {
                            point: camera.translation + offset * (camera.aperture_radius / r),
                            index: i,
                            count: n,
                        }
                    } else {
                        sample_aperture_ring(camera, seed, i + attempt * n, (attempt + 1) * n)?
                    }
                }
            };
            match lens_ray(camera, &base, &sample) {
                Ok(ray) => break (sample, ray),
                Err(_) if attempt < 8 => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        let mut tape = want_tape.then(RayTape::default);
        let color = render_ray(field, occupancy, &ray, cfg, (i, n), jitter, tape.as_mut())?;
        sum_rgb += color.rgb;
        sum_alpha += color.alpha;
        if let (Some(rays), Some(tape)) = (rays.as_mut(), tape) {
            rays.push(PixelRayTape {
                tape,
                ray,
                aperture: ApertureSample {
                    index: i,
                    count: n,
                    ..sample
                },
                base,
                color: color.rgb,
                alpha: color.alpha,
            });
        }
    }
    let color = PixelColor {
        rgb: sum_rgb / n as f64,
        alpha: sum_alpha / n as f64,
    };
    let pixel_tape = rays.map(|rays| PixelTape {
        rays,
        color: color.rgb,
        alpha: color.alpha,
        pixel_seed: seed,
    });
    Ok((color, pixel_tape))
}

/// Aperture-averaged pixel color: the mean over `n` disk-sampled lens rays,
/// averaged in linear space. Records a full tape for the backward pass.
pub fn render_pixel(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    camera: &crate::optics::Camera,
    px: (u32, u32),
    cfg: &RenderConfig,
) -> Result<(PixelColor, PixelTape)> {
    let (color, tape) =
        render_pixel_inner(field, occupancy, camera, px, cfg, AperturePattern::Disk, true)?;
    Ok((color, tape.expect("tape requested")))
}

/// [`render_pixel`] without tape recording.
pub fn render_pixel_color(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    camera: &crate::optics::Camera,
    px: (u32, u32),
    cfg: &RenderConfig,
) -> Result<PixelColor> {
    render_pixel_inner(field, occupancy, camera, px, cfg, AperturePattern::Disk, false)
        .map(|(c, _)| c)
}

/// Pixel color with rays cast from the aperture *boundary* instead of the
/// disk interior, sharing the pixel's seed and comb jitter.
pub fn render_ring_pixel(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    camera: &crate::optics::Camera,
    px: (u32, u32),
    cfg: &RenderConfig,
) -> Result<PixelColor> {
    render_pixel_inner(field, occupancy, camera, px, cfg, AperturePattern::Ring, false)
        .map(|(c, _)| c)
}

/// Row-major image of linear RGB pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    pub width: u32,
    pub height: u32,
    pixels: Vec<Rgb>,
}

impl LinearImage {
    pub fn new(width: u32, height: u32) -> Self {
        LinearImage {
            width,
            height,
            pixels: vec![Rgb::zeros(); (width * height) as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != (width * height) as usize {
            return Err(Error::domain(format!(
                "pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(LinearImage {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: Rgb) {
        self.pixels[(y * self.width + x) as usize] = value;
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    /// Root-mean-square difference over all channels.
    pub fn rms_diff(&self, other: &LinearImage) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        (sum / (self.pixels.len() * 3) as f64).sqrt()
    }

    /// Largest absolute per-channel difference.
    pub fn max_diff(&self, other: &LinearImage) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs().max())
            .fold(0.0, f64::max)
    }
}

/// Renders every pixel of `camera`'s image, row-major. Parallel over pixels
/// unless `cfg.serial`; both modes produce identical images because each
/// pixel is computed independently.
pub fn render_image(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    camera: &crate::optics::Camera,
    cfg: &RenderConfig,
) -> Result<LinearImage> {
    cfg.validate()?;
    camera.validate()?;
    let built;
    let occ = if cfg.use_occupancy {
        match occupancy {
            Some(o) => Some(o),
            None => {
                built = crate::field::rebuild_occupancy(field, 1e-3)?;
                Some(&built)
            }
        }
    } else {
        None
    };
    let (w, h) = (camera.width, camera.height);
    let render_one = |idx: u32| -> Result<Rgb> {
        let (x, y) = (idx % w, idx / w);
        Ok(render_pixel_color(field, occ, camera, (x, y), cfg)?.rgb)
    };
    let pixels: Result<Vec<Rgb>> = if cfg.serial {
        (0..w * h).map(render_one).collect()
    } else {
        (0..w * h).into_par_iter().map(render_one).collect()
    };
    LinearImage::from_pixels(w, h, pixels?)
}

// ---------------------------------------------------------------------------
// sRGB transfer
// ---------------------------------------------------------------------------

/// Encode a linear value into sRGB. Input is clamped to [0, 1].
pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        // 1.055 v^(1/2.4) - 0.055, arranged so v = 1 encodes to exactly 1.
        1.055 * (v.powf(1.0 / 2.4) - 1.0) + 1.0
    }
}

/// Decode an sRGB-encoded value back to linear.
pub fn srgb_to_linear(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb_u8(v: f64) -> u8 {
    (linear_to_srgb(v) * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn srgb_u8_to_linear(u: u8) -> f64 {
    srgb_to_linear(u as f64 / 255.0)
}
