//! Reverse pass.
//!
//! `backward_ray` replays a quadrature tape and produces exact reverse-mode
//! gradients of the discretized estimator: contributions to every touched
//! field parameter plus the ray-origin and ray-direction adjoints. The
//! compositing recurrence is differentiated without dividing by `1 - alpha`,
//! so fully opaque samples are safe.
//!
//! Two lens parameters get special treatment:
//! - focus distance chains the ray-direction adjoint through the Jacobian of
//!   the normalized aperture-ray direction, since only the direction depends
//!   on it;
//! - aperture radius uses the analytic boundary form: the derivative of a
//!   disk average with respect to its radius is `2/a_R` times the difference
//!   between the boundary average and the disk average. Rendering the ring
//!   gives that derivative at the cost of one extra forward pass, avoiding
//!   the high-variance path of differentiating sample positions.

use crate::error::{Error, Result};
use crate::field::{FieldGrads, OccupancyGrid, VoxelField};
use crate::optics::Camera;
use crate::render::{
    render_pixel_color, render_ring_pixel, PixelColor, PixelTape, RayTape, RenderConfig,
};
use crate::{Rgb, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loss gradient at a pixel, `dL/dC` in linear space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelAdjoint {
    pub d_color: Rgb,
}

/// Gradients of the two defocus parameters shared by a capture.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DefocusGrads {
    pub d_aperture: f64,
    pub d_focus: f64,
}

/// Ray-input adjoints produced by [`backward_ray`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RayBackward {
    pub d_origin: Vec3,
    pub d_dir: Vec3,
}

/// Reverse pass over one ray tape.
///
/// Seeds with `adjoint = dL/dC_ray`, scatters parameter gradients into
/// `grads`, and returns the adjoints of the ray origin and (unnormalized)
/// direction. Fails if the field parameters changed since the tape was
/// recorded.
pub fn backward_ray(
    field: &VoxelField,
    tape: &RayTape,
    adjoint: &Rgb,
    grads: &mut FieldGrads,
) -> Result<RayBackward> {
    if tape.field_version != field.version() {
        return Err(Error::StaleTape {
            tape: tape.field_version,
            field: field.version(),
        });
    }
    let mut out = RayBackward::default();
    if tape.samples.is_empty() {
        return Ok(out);
    }

    // s_k = g . (c_k - bg): how much the pixel moves when sample k's weight
    // grows at the expense of the background.
    //
    // dL/dalpha_k = T_k (s_k - R_k) with the suffix
    // R_k = sum_{j>k} s_j alpha_j prod_{k<i<j} (1 - alpha_i),
    // accumulated back to front: R_k = s_{k+1} alpha_{k+1} + (1-alpha_{k+1}) R_{k+1}.
    let mut suffix = 0.0;
    for rec in tape.samples.iter().rev() {
        let s = adjoint.dot(&(rec.color - tape.background));
        let d_alpha = rec.trans * (s - suffix);
        // alpha = 1 - exp(-sigma step)
        let d_sigma = d_alpha * tape.step * (1.0 - rec.alpha);
        let weight = rec.trans * rec.alpha;
        let d_color = adjoint * weight;
        let d_x = field.query_grad(&rec.position, d_sigma, &d_color, grads);
        out.d_origin += d_x;
        out.d_dir += d_x * rec.t;
        suffix = s * rec.alpha + (1.0 - rec.alpha) * suffix;
    }
    Ok(out)
}

/// Reverse pass over a whole pixel: each ray is seeded with `adjoint / n`
/// to match the forward's linear-space average. Returns per-ray adjoints
/// aligned with `tape.rays`.
pub fn backward_pixel(
    field: &VoxelField,
    tape: &PixelTape,
    adjoint: &PixelAdjoint,
    grads: &mut FieldGrads,
) -> Result<Vec<RayBackward>> {
    let n = tape.rays.len().max(1);
    let per_ray = adjoint.d_color / n as f64;
    tape.rays
        .iter()
        .map(|ray_tape| backward_ray(field, &ray_tape.tape, &per_ray, grads))
        .collect()
}

/// Chains per-ray direction adjoints into the focus-distance gradient.
///
/// For focus point `P = o + d z_f` and aperture point `a`, the marched
/// direction is `(P - a) / |P - a|`, so
/// `d dir / d z_f = (I - dir dir^T) d / |P - a|`. Origins do not depend on
/// the focus distance and contribute nothing.
pub fn focus_gradient(camera: &Camera, tape: &PixelTape, ray_grads: &[RayBackward]) -> f64 {
    let mut total = 0.0;
    for (ray_tape, rb) in tape.rays.iter().zip(ray_grads) {
        let base = &ray_tape.base;
        let focus_point = base.origin + base.dir * camera.focus_distance;
        let v = focus_point - ray_tape.ray.origin;
        let norm = v.norm();
        if norm < crate::optics::FOCUS_DEGENERACY_EPS {
            continue;
        }
        let dir = ray_tape.ray.dir;
        // (I - dir dir^T) d / |v|, contracted with the direction adjoint.
        let projected = base.dir - dir * dir.dot(&base.dir);
        total += rb.d_dir.dot(&projected) / norm;
    }
    total
}

/// The boundary identity for the derivative of a disk average with respect
/// to the disk radius, applied channel-wise.
pub fn ring_gradient(aperture_radius: f64, c_ring: &Rgb, c_disk: &Rgb) -> Rgb {
    (c_ring - c_disk) * (2.0 / aperture_radius)
}

/// Analytic aperture-radius gradient of the loss at one pixel.
///
/// Renders the aperture boundary with the pixel's own sample streams (common
/// random numbers against `pixel`) and contracts the boundary identity with
/// the adjoint. A zero aperture has no boundary; the gradient is reported as
/// zero.
pub fn aperture_gradient(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    camera: &Camera,
    px: (u32, u32),
    cfg: &RenderConfig,
    pixel: &PixelColor,
    adjoint: &PixelAdjoint,
) -> Result<f64> {
    if camera.aperture_radius == 0.0 {
        log::warn!("aperture gradient requested at a_R = 0; defined only in the limit, returning 0");
        return Ok(0.0);
    }
    let ring = render_ring_pixel(field, occupancy, camera, px, cfg)?;
    let per_channel = ring_gradient(camera.aperture_radius, &ring.rgb, &pixel.rgb);
    Ok(adjoint.d_color.dot(&per_channel))
}

/// Central finite difference `(f(x+h) - f(x-h)) / 2h`.
///
/// The closure must be deterministic in everything but `x` (common random
/// numbers), or the estimate is noise.
pub fn fd_oracle<F: FnMut(f64) -> f64>(mut f: F, x: f64, step: f64) -> f64 {
    debug_assert!(step > 0.0);
    (f(x + step) - f(x - step)) / (2.0 * step)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradKind {
    Field,
    Focus,
    Aperture,
}

impl GradKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradKind::Field => "field",
            GradKind::Focus => "focus",
            GradKind::Aperture => "aperture",
        }
    }
}

/// One analytic-vs-finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub probe: usize,
    pub kind: GradKind,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

/// Probe counts and RNG seed for a gradient-check run.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub field_probes: usize,
    pub focus_probes: usize,
    pub aperture_probes: usize,
    pub seed: u64,
    /// Relative finite-difference step for the focus distance. Small enough
    /// that the difference window stays inside one smooth piece of the
    /// trilinear field along every sample's motion.
    pub focus_step_rel: f64,
    /// Relative finite-difference step for the aperture radius.
    pub aperture_step_rel: f64,
    /// Rays per pixel for aperture probes. The boundary estimator and the
    /// radial finite difference are distinct estimators of the same
    /// derivative; they agree at the contract tolerance only once the
    /// per-pixel budget is healthy.
    pub aperture_rays: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            field_probes: 50,
            focus_probes: 50,
            aperture_probes: 50,
            seed: 0x9d2c,
            focus_step_rel: 1e-5,
            aperture_step_rel: 1e-4,
            aperture_rays: 2048,
        }
    }
}

fn random_adjoint(rng: &mut ChaCha8Rng) -> Rgb {
    Rgb::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    )
}

/// Runs the full gradient-check suite against one scene.
///
/// Pixels are drawn at random from the given cameras; probes that land on
/// insensitive pixels (finite difference below noise) are redrawn a few
/// times so the comparison exercises real gradients.
pub fn run_gradcheck(
    field: &VoxelField,
    cameras: &[Camera],
    cfg: &RenderConfig,
    gc: &GradCheckConfig,
) -> Result<Vec<GradCheckRow>> {
    if cameras.is_empty() {
        return Err(Error::domain("gradient check needs at least one camera"));
    }
    // Finite differences straddle the early-termination flip if marching
    // can truncate; probe with an effectively untruncated estimator.
    let mut cfg = cfg.clone();
    cfg.min_transmittance = cfg.min_transmittance.min(1e-9);
    let cfg = &cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut rows = Vec::new();
    let mut probe_id = 0usize;

    // Field parameters.
    let mut fd_field = field.clone();
    for _ in 0..gc.field_probes {
        let g = random_adjoint(&mut rng);
        let adjoint = PixelAdjoint { d_color: g };
        let mut chosen = None;
        for _attempt in 0..16 {
            let cam = &cameras[rng.gen_range(0..cameras.len())];
            let px = (
                rng.gen_range(0..cam.width),
                rng.gen_range(0..cam.height),
            );
            let (_, tape) = crate::render::render_pixel(field, None, cam, px, cfg)?;
            let mut grads = FieldGrads::zeros_like(field);
            backward_pixel(field, &tape, &adjoint, &mut grads)?;
            // Parameters this pixel actually touched, largest first.
            let mut touched: Vec<(usize, f64)> = (0..field.param_count())
                .filter_map(|i| {
                    let v = grads.get_flat(i);
                    (v.abs() > 1e-9).then_some((i, v))
                })
                .collect();
            if touched.is_empty() {
                continue;
            }
            touched.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
            let pick = rng.gen_range(0..touched.len().min(32));
            chosen = Some((cam.clone(), px, touched[pick]));
            break;
        }
        let Some((cam, px, (param, analytic))) = chosen else {
            continue;
        };
        let h = 1e-4;
        let fd = {
            let value = |f: &VoxelField| -> Result<f64> {
                Ok(g.dot(&render_pixel_color(f, None, &cam, px, cfg)?.rgb))
            };
            crate::field::param_add_flat(&mut fd_field, param, h);
            let up = value(&fd_field)?;
            crate::field::param_add_flat(&mut fd_field, param, -2.0 * h);
            let dn = value(&fd_field)?;
            crate::field::param_add_flat(&mut fd_field, param, h);
            (up - dn) / (2.0 * h)
        };
        rows.push(GradCheckRow {
            probe: probe_id,
            kind: GradKind::Field,
            analytic,
            fd,
            rel_err: rel_err(analytic, fd),
        });
        probe_id += 1;
    }

    // Focus distance.
    for _ in 0..gc.focus_probes {
        let g = random_adjoint(&mut rng);
        let adjoint = PixelAdjoint { d_color: g };
        let mut best: Option<(f64, f64)> = None;
        for _attempt in 0..16 {
            let cam = cameras[rng.gen_range(0..cameras.len())].clone();
            let px = (
                rng.gen_range(0..cam.width),
                rng.gen_range(0..cam.height),
            );
            let (_, tape) = crate::render::render_pixel(field, None, &cam, px, cfg)?;
            let mut grads = FieldGrads::zeros_like(field);
            let ray_grads = backward_pixel(field, &tape, &adjoint, &mut grads)?;
            let analytic = focus_gradient(&cam, &tape, &ray_grads);
            let h = gc.focus_step_rel * cam.focus_distance;
            let fd = fd_oracle(
                |zf| {
                    let mut c = cam.clone();
                    c.focus_distance = zf;
                    g.dot(&render_pixel_color(field, None, &c, px, cfg).unwrap().rgb)
                },
                cam.focus_distance,
                h,
            );
            if best.is_none() || fd.abs() > best.unwrap().1.abs() {
                best = Some((analytic, fd));
            }
            // Keep drawing until the pixel has real focus sensitivity, so
            // the comparison is not dominated by finite-difference
            // truncation on a near-flat objective.
            if fd.abs() > 1e-3 {
                break;
            }
        }
        let Some((analytic, fd)) = best else {
            continue;
        };
        rows.push(GradCheckRow {
            probe: probe_id,
            kind: GradKind::Focus,
            analytic,
            fd,
            rel_err: rel_err(analytic, fd),
        });
        probe_id += 1;
    }

    // Aperture radius.
    let mut cfg_ap = cfg.clone();
    cfg_ap.rays_per_pixel = cfg.rays_per_pixel.max(gc.aperture_rays);
    for _ in 0..gc.aperture_probes {
        let g = random_adjoint(&mut rng);
        let adjoint = PixelAdjoint { d_color: g };
        let mut best: Option<(f64, f64)> = None;
        for _attempt in 0..48 {
            let cam = cameras[rng.gen_range(0..cameras.len())].clone();
            let px = (
                rng.gen_range(0..cam.width),
                rng.gen_range(0..cam.height),
            );
            let pixel = render_pixel_color(field, None, &cam, px, &cfg_ap)?;
            let analytic =
                aperture_gradient(field, None, &cam, px, &cfg_ap, &pixel, &adjoint)?;
            let h = gc.aperture_step_rel * cam.aperture_radius;
            let fd = fd_oracle(
                |ar| {
                    let mut c = cam.clone();
                    c.aperture_radius = ar;
                    g.dot(&render_pixel_color(field, None, &c, px, &cfg_ap).unwrap().rgb)
                },
                cam.aperture_radius,
                h,
            );
            if best.is_none() || fd.abs() > best.unwrap().1.abs() {
                best = Some((analytic, fd));
            }
            // Relative agreement is only resolvable where the derivative
            // itself is strong; the estimator-difference noise floor is a
            // few 1e-3 in absolute terms.
            if fd.abs() > 5e-2 {
                break;
            }
        }
        let Some((analytic, fd)) = best else {
            continue;
        };
        rows.push(GradCheckRow {
            probe: probe_id,
            kind: GradKind::Aperture,
            analytic,
            fd,
            rel_err: rel_err(analytic, fd),
        });
        probe_id += 1;
    }

    Ok(rows)
}

/// CSV serialization of a gradient-check report.
pub fn gradcheck_csv(rows: &[GradCheckRow]) -> String {
    let mut s = String::from("probe,kind,analytic,fd,rel_err\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.12e},{:.12e},{:.6e}\n",
            r.probe,
            r.kind.as_str(),
            r.analytic,
            r.fd,
            r.rel_err
        ));
    }
    s
}
