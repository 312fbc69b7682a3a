//! Reconstruction loop.
//!
//! Joint first-order optimization of the voxel field and, optionally, the
//! capture's shared aperture radius and focus distance. Batches are sized by
//! a sample-point target: pixels are drawn until the predicted number of
//! quadrature samples reaches the target, so batch cost stays roughly
//! constant as the scene empties out. The loss is the piecewise smooth-L1
//! on linear-space residuals; Adam drives both parameter groups, with the
//! base learning rate decayed by a fixed factor at two schedule boundaries.
//!
//! Defocus parameters step at a rate scaled by their own initialization
//! (they live on scales orders of magnitude apart from field parameters and
//! from each other), and are projected back to their feasible set after
//! every step: aperture radius nonnegative, focus distance beyond the focal
//! length.

use crate::error::{Error, Result};
use crate::field::{rebuild_occupancy, FieldGrads, OccupancyGrid, VoxelField};
use crate::grad::{aperture_gradient, backward_pixel, focus_gradient, DefocusGrads, PixelAdjoint};
use crate::io::{Dataset, DatasetView, Split};
use crate::metrics::{psnr, ssim, SrgbImage};
use crate::optics::Camera;
use crate::render::{render_image, render_pixel, RenderConfig};
use crate::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

/// Which forward model the reconstruction uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    /// Finite aperture: rays sampled across the lens.
    Lens,
    /// Single center ray per pixel; defocus cannot be modeled.
    Pinhole,
}

/// Everything a reconstruction run needs to know.
#[derive(Debug, Clone)]
pub struct ReconConfig {
    pub grid_resolution: [usize; 3],
    /// Base learning rate for field parameters.
    pub lr: f64,
    pub steps: usize,
    /// Multiplicative decay applied at each boundary.
    pub decay_factor: f64,
    /// Two absolute step indices where the decay kicks in.
    pub decay_steps: [usize; 2],
    /// Quadrature-sample budget per batch; batch size adapts to meet it.
    pub sample_point_target: usize,
    /// Fixed pixel count per batch instead of the sample target.
    pub fixed_pixels_per_batch: Option<usize>,
    pub rays_per_pixel: usize,
    /// Start at 1 ray per pixel and double every epoch (one full pass of
    /// the dataset's pixel count) up to `rays_per_pixel`.
    pub rpp_doubling: bool,
    pub optimize_aperture: bool,
    pub optimize_focus: bool,
    /// Relative step scale for the defocus parameters: the absolute Adam
    /// rate is `defocus_lr` times each parameter's initial value.
    pub defocus_lr: f64,
    pub seed: u64,
    pub camera_model: CameraModel,
    /// Initial aperture radius as a multiple of the dataset's true value.
    pub aperture_scale: f64,
    /// Initial focus distance as a multiple of the dataset's true value.
    pub focus_scale: f64,
    pub step_size: f64,
    pub max_samples_per_ray: usize,
    pub background: Rgb,
    pub use_occupancy: bool,
    pub occupancy_threshold: f64,
    /// Rebuild the occupancy grid every this many steps.
    pub occupancy_interval: usize,
    /// Evaluate held-out views and write a metrics row this often.
    pub eval_interval: usize,
    pub serial: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            grid_resolution: [96, 96, 96],
            lr: 3e-2,
            steps: 2000,
            decay_factor: 0.33,
            decay_steps: [0, 0], // filled from steps when zero
            sample_point_target: 262_144,
            fixed_pixels_per_batch: None,
            rays_per_pixel: 8,
            rpp_doubling: false,
            optimize_aperture: false,
            optimize_focus: false,
            defocus_lr: 3e-3,
            seed: 0,
            camera_model: CameraModel::Lens,
            aperture_scale: 1.0,
            focus_scale: 1.0,
            step_size: 2e-3,
            max_samples_per_ray: 4096,
            background: Rgb::zeros(),
            use_occupancy: true,
            occupancy_threshold: 1e-3,
            occupancy_interval: 100,
            eval_interval: 250,
            serial: false,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("steps must be positive"));
        }
        if self.rays_per_pixel == 0 {
            return Err(Error::domain("rays_per_pixel must be >= 1"));
        }
        if self.sample_point_target < self.max_samples_per_ray {
            return Err(Error::domain(
                "sample_point_target must be at least max_samples_per_ray",
            ));
        }
        if !(self.lr >= 0.0 && self.defocus_lr >= 0.0) {
            return Err(Error::domain("learning rates must be nonnegative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::domain("decay factor must be in (0, 1]"));
        }
        Ok(())
    }

    /// Schedule boundaries, defaulting to 60% and 80% of the run.
    pub fn schedule(&self) -> [usize; 2] {
        if self.decay_steps == [0, 0] {
            [self.steps * 6 / 10, self.steps * 8 / 10]
        } else {
            self.decay_steps
        }
    }
}

/// Piecewise loss per channel: quadratic inside the unit residual band,
/// absolute outside; summed over channels.
pub fn smooth_l1(residual: &Rgb) -> f64 {
    residual
        .iter()
        .map(|&x| {
            let a = x.abs();
            if a <= 1.0 {
                x * x
            } else {
                a
            }
        })
        .sum()
}

/// Channel-wise derivative of [`smooth_l1`].
pub fn smooth_l1_grad(residual: &Rgb) -> Rgb {
    Rgb::new(
        smooth_l1_grad_1d(residual.x),
        smooth_l1_grad_1d(residual.y),
        smooth_l1_grad_1d(residual.z),
    )
}

fn smooth_l1_grad_1d(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        2.0 * x
    } else {
        x.signum()
    }
}

/// Learning rate at a step: base rate times the decay factor once per
/// passed boundary.
pub fn lr_at(step: usize, cfg: &ReconConfig) -> f64 {
    let mut lr = cfg.lr;
    for boundary in cfg.schedule() {
        if step >= boundary {
            lr *= cfg.decay_factor;
        }
    }
    lr
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// Adam moments for one parameter array.
#[derive(Debug, Clone)]
struct AdamArray {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamArray {
    fn new(len: usize) -> Self {
        AdamArray {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One Adam step over the whole array.
    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: usize) {
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        params
            .par_iter_mut()
            .zip(self.m.par_iter_mut())
            .zip(self.v.par_iter_mut())
            .zip(grads.par_iter())
            .for_each(|(((p, m), v), &g)| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            });
    }
}

/// Adam moments for one scalar.
#[derive(Debug, Clone, Copy, Default)]
struct AdamScalar {
    m: f64,
    v: f64,
}

impl AdamScalar {
    fn update(&mut self, param: &mut f64, grad: f64, lr: f64, t: usize) {
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad;
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad;
        let m_hat = self.m / (1.0 - ADAM_BETA1.powi(t as i32));
        let v_hat = self.v / (1.0 - ADAM_BETA2.powi(t as i32));
        *param -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One batch element: a training pixel and its linear-space target.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem {
    pub view: usize,
    pub px: (u32, u32),
    pub target: Rgb,
}

/// Mutable optimization state.
pub struct TrainState {
    pub field: VoxelField,
    pub occupancy: Option<OccupancyGrid>,
    adam_density: AdamArray,
    adam_color: AdamArray,
    /// Shared defocus parameters for the whole capture.
    pub aperture: f64,
    pub focus: f64,
    adam_aperture: AdamScalar,
    adam_focus: AdamScalar,
    /// Absolute Adam rates for the defocus parameters, fixed at init.
    aperture_lr_abs: f64,
    focus_lr_abs: f64,
    /// Lower bound for the focus projection (focal length plus margin).
    focus_floor: f64,
    pub step: usize,
    rng: ChaCha8Rng,
    /// Running estimate of evaluated samples per ray, for batch sizing.
    pub avg_samples_per_ray: f64,
    /// Pixels consumed so far; drives the optional rays-per-pixel doubling.
    pixels_consumed: u64,
    /// Rays per pixel snapshotted when the current batch was drawn.
    batch_rpp: usize,
    /// Scratch gradient buffers, one per parallel chunk.
    grad_pool: Vec<FieldGrads>,
    master_grads: FieldGrads,
}

impl TrainState {
    pub fn new(dataset: &Dataset, cfg: &ReconConfig) -> Result<TrainState> {
        cfg.validate()?;
        let field = VoxelField::new(cfg.grid_resolution, dataset.bbox)?;
        let occupancy = cfg
            .use_occupancy
            .then(|| rebuild_occupancy(&field, cfg.occupancy_threshold))
            .transpose()?;
        let aperture = match cfg.camera_model {
            CameraModel::Lens => dataset.aperture_radius * cfg.aperture_scale,
            CameraModel::Pinhole => 0.0,
        };
        let focus = dataset.focus_distance * cfg.focus_scale;
        let n_density = field.density_raw().len();
        let n_color = field.color_raw().len();
        let master_grads = FieldGrads::zeros_like(&field);
        // A fresh marching estimate: assume rays cross the whole box.
        let diag = dataset.bbox.extent().norm();
        let avg = (diag / cfg.step_size).min(cfg.max_samples_per_ray as f64);
        Ok(TrainState {
            field,
            occupancy,
            adam_density: AdamArray::new(n_density),
            adam_color: AdamArray::new(n_color),
            aperture,
            focus,
            adam_aperture: AdamScalar::default(),
            adam_focus: AdamScalar::default(),
            aperture_lr_abs: cfg.defocus_lr * aperture.max(1e-6),
            focus_lr_abs: cfg.defocus_lr * focus.max(1e-6),
            focus_floor: dataset.focal_length + 1e-6,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            avg_samples_per_ray: avg.max(1.0),
            pixels_consumed: 0,
            batch_rpp: 0,
            grad_pool: Vec::new(),
            master_grads,
        })
    }

    /// Rays per pixel at the current point of the run.
    pub fn current_rays_per_pixel(&self, dataset: &Dataset, cfg: &ReconConfig) -> usize {
        if !cfg.rpp_doubling {
            return cfg.rays_per_pixel;
        }
        let epoch_pixels: u64 = dataset
            .train_views()
            .map(|v| (v.camera.width * v.camera.height) as u64)
            .sum();
        let epoch = (self.pixels_consumed / epoch_pixels.max(1)) as u32;
        (1usize << epoch.min(20)).min(cfg.rays_per_pixel)
    }

    /// Render configuration for a training step.
    fn render_cfg(&self, bounds: crate::optics::RayBounds, rpp: usize, cfg: &ReconConfig) -> RenderConfig {
        RenderConfig {
            rays_per_pixel: rpp,
            step_size: cfg.step_size,
            bounds,
            max_samples_per_ray: cfg.max_samples_per_ray,
            background: cfg.background,
            use_occupancy: cfg.use_occupancy,
            min_transmittance: crate::render::TRANSMITTANCE_EPS,
            seed: cfg.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            serial: cfg.serial,
        }
    }

    /// The training camera for a view, carrying the current defocus state.
    pub fn camera_for(&self, view: &DatasetView) -> Camera {
        let mut cam = view.camera.clone();
        cam.aperture_radius = self.aperture;
        cam.focus_distance = self.focus.max(self.focus_floor);
        cam
    }
}

/// Draws training pixels until the predicted quadrature-sample count
/// reaches the target (or exactly `fixed_pixels_per_batch` when set).
pub fn make_batch(dataset: &Dataset, state: &mut TrainState, cfg: &ReconConfig) -> Vec<BatchItem> {
    let train: Vec<(usize, &DatasetView)> = dataset
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.split == Split::Train)
        .collect();
    let rpp = state.current_rays_per_pixel(dataset, cfg);
    let size = match cfg.fixed_pixels_per_batch {
        Some(n) => n.max(1),
        None => {
            let per_pixel = state.avg_samples_per_ray.max(1.0) * rpp as f64;
            ((cfg.sample_point_target as f64 / per_pixel).round() as usize).clamp(16, 65_536)
        }
    };
    let mut batch = Vec::with_capacity(size);
    for _ in 0..size {
        let (view_idx, view) = train[state.rng.gen_range(0..train.len())];
        let px = (
            state.rng.gen_range(0..view.camera.width),
            state.rng.gen_range(0..view.camera.height),
        );
        batch.push(BatchItem {
            view: view_idx,
            px,
            target: view.target.get(px.0, px.1),
        });
    }
    state.batch_rpp = rpp;
    state.pixels_consumed += batch.len() as u64;
    batch
}

/// Per-chunk accumulator for the backward pass.
struct ChunkResult {
    loss: f64,
    defocus: DefocusGrads,
    samples: u64,
    rays: u64,
    worst_pixel: Option<(usize, (u32, u32))>,
}

/// One optimizer step over a batch: forward renders, reverse pass, Adam
/// updates, defocus projection. Returns the mean batch loss.
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    batch: &[BatchItem],
    cfg: &ReconConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let bounds = dataset_bounds(dataset);
    let rpp = if state.batch_rpp > 0 {
        state.batch_rpp
    } else {
        state.current_rays_per_pixel(dataset, cfg)
    };
    let render_cfg = state.render_cfg(bounds, rpp, cfg);
    let inv_batch = 1.0 / batch.len() as f64;

    // Deterministic parallelism: fixed chunking, ordered merge.
    let n_chunks = if cfg.serial {
        1
    } else {
        rayon::current_num_threads().clamp(1, 16).min(batch.len())
    };
    let chunk_len = batch.len().div_ceil(n_chunks);
    let chunks: Vec<&[BatchItem]> = batch.chunks(chunk_len).collect();
    while state.grad_pool.len() < chunks.len() {
        state.grad_pool.push(FieldGrads::zeros_like(&state.field));
    }

    let field = &state.field;
    let occupancy = state.occupancy.as_ref();
    let aperture = state.aperture;
    let focus = state.focus.max(state.focus_floor);
    let run_chunk = |chunk: &[BatchItem], grads: &mut FieldGrads| -> Result<ChunkResult> {
        grads.clear();
        let mut out = ChunkResult {
            loss: 0.0,
            defocus: DefocusGrads::default(),
            samples: 0,
            rays: 0,
            worst_pixel: None,
        };
        for item in chunk {
            let view = &dataset.views[item.view];
            let mut cam = view.camera.clone();
            cam.aperture_radius = aperture;
            cam.focus_distance = focus;
            let (pixel, tape) = render_pixel(field, occupancy, &cam, item.px, &render_cfg)?;
            let residual = pixel.rgb - item.target;
            let pixel_loss = smooth_l1(&residual);
            if !pixel_loss.is_finite() {
                out.worst_pixel = Some((item.view, item.px));
                out.loss = f64::NAN;
                break;
            }
            out.loss += pixel_loss;
            let adjoint = PixelAdjoint {
                d_color: smooth_l1_grad(&residual) * inv_batch,
            };
            let ray_grads = backward_pixel(field, &tape, &adjoint, grads)?;
            for rt in &tape.rays {
                out.samples += rt.tape.samples.len() as u64;
            }
            out.rays += tape.rays.len() as u64;
            if cfg.optimize_focus {
                out.defocus.d_focus += focus_gradient(&cam, &tape, &ray_grads);
            }
            if cfg.optimize_aperture && aperture > 0.0 {
                out.defocus.d_aperture += aperture_gradient(
                    field,
                    occupancy,
                    &cam,
                    item.px,
                    &render_cfg,
                    &pixel,
                    &adjoint,
                )?;
            }
        }
        Ok(out)
    };

    let pool = &mut state.grad_pool;
    let results: Result<Vec<ChunkResult>> = if cfg.serial {
        chunks
            .iter()
            .zip(pool[..chunks.len()].iter_mut())
            .map(|(c, g)| run_chunk(c, g))
            .collect()
    } else {
        chunks
            .par_iter()
            .zip(pool[..chunks.len()].par_iter_mut())
            .map(|(c, g)| run_chunk(c, g))
            .collect()
    };
    let results = results?;

    // Merge ordered chunk gradients into the master buffer.
    state.master_grads.clear();
    for g in &state.grad_pool[..chunks.len()] {
        state.master_grads.merge(g);
    }

    let mut loss = 0.0;
    let mut defocus = DefocusGrads::default();
    let mut samples = 0u64;
    let mut rays = 0u64;
    for r in &results {
        if !r.loss.is_finite() {
            let (view, px) = r.worst_pixel.unwrap_or((0, (0, 0)));
            return Err(Error::numeric(format!(
                "non-finite loss at view {view} pixel {px:?} on step {}",
                state.step
            )));
        }
        loss += r.loss;
        defocus.d_aperture += r.defocus.d_aperture;
        defocus.d_focus += r.defocus.d_focus;
        samples += r.samples;
        rays += r.rays;
    }
    loss *= inv_batch;

    // Parameter updates.
    let t = state.step + 1;
    let lr = lr_at(state.step, cfg);
    let schedule_scale = lr / cfg.lr.max(f64::MIN_POSITIVE);
    {
        let master = &state.master_grads;
        let (density, color) = state.field.params_mut();
        state.adam_density.update(density, &master.density, lr, t);
        state.adam_color.update(color, &master.color, lr, t);
    }
    if cfg.optimize_aperture {
        state.adam_aperture.update(
            &mut state.aperture,
            defocus.d_aperture,
            state.aperture_lr_abs * schedule_scale,
            t,
        );
        state.aperture = state.aperture.max(0.0);
    }
    if cfg.optimize_focus {
        state.adam_focus.update(
            &mut state.focus,
            defocus.d_focus,
            state.focus_lr_abs * schedule_scale,
            t,
        );
        state.focus = state.focus.max(state.focus_floor);
    }

    // Housekeeping.
    if rays > 0 {
        let observed = samples as f64 / rays as f64;
        state.avg_samples_per_ray = 0.9 * state.avg_samples_per_ray + 0.1 * observed.max(1.0);
    }
    state.step += 1;
    if cfg.use_occupancy && state.step % cfg.occupancy_interval == 0 {
        state.occupancy = Some(rebuild_occupancy(&state.field, cfg.occupancy_threshold)?);
    }
    Ok(loss)
}

/// Marching bounds that cover the scene box from every camera in the
/// dataset.
pub fn dataset_bounds(dataset: &Dataset) -> crate::optics::RayBounds {
    let half_diag = dataset.bbox.extent().norm() * 0.5;
    let center = dataset.bbox.center();
    let mut near = f64::INFINITY;
    let mut far = 0.0f64;
    for v in &dataset.views {
        let d = (v.camera.translation - center).norm();
        near = near.min(d - 1.2 * half_diag);
        far = far.max(d + 1.2 * half_diag);
    }
    crate::optics::RayBounds {
        t_near: near.max(1e-3),
        t_far: far.max(1.0e-2),
    }
}

/// One metrics row, written per evaluation.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub aperture: f64,
    pub focus: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step,loss,lr,a_R,z_f,val_psnr,val_ssim\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.4},{:.6}\n",
            r.step, r.loss, r.lr, r.aperture, r.focus, r.val_psnr, r.val_ssim
        ));
    }
    s
}

/// Outcome of a full reconstruction run.
#[derive(Debug, Clone)]
pub struct ReconOutcome {
    pub aperture: f64,
    pub focus: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub rows: Vec<MetricsRow>,
    pub wall_seconds: f64,
}

/// Mean PSNR/SSIM over the held-out all-in-focus views, scored on
/// sRGB-quantized images.
pub fn evaluate_validation(
    field: &VoxelField,
    occupancy: Option<&OccupancyGrid>,
    dataset: &Dataset,
    cfg: &ReconConfig,
) -> Result<(f64, f64)> {
    let bounds = dataset_bounds(dataset);
    let mut total_psnr = 0.0;
    let mut total_ssim = 0.0;
    let mut count = 0usize;
    for view in dataset.val_views() {
        let render_cfg = RenderConfig {
            rays_per_pixel: 1,
            step_size: cfg.step_size,
            bounds,
            max_samples_per_ray: cfg.max_samples_per_ray,
            background: cfg.background,
            use_occupancy: cfg.use_occupancy,
            min_transmittance: crate::render::TRANSMITTANCE_EPS,
            seed: cfg.seed,
            serial: cfg.serial,
        };
        let img = render_image(field, occupancy, &view.camera, &render_cfg)?;
        let rendered = SrgbImage::from_linear(&img);
        let target = SrgbImage::from_linear(&view.target);
        total_psnr += psnr(&rendered, &target)?;
        total_ssim += ssim(&rendered, &target)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::domain("dataset has no validation views"));
    }
    Ok((total_psnr / count as f64, total_ssim / count as f64))
}

/// Runs the full reconstruction: optimization, periodic validation, and
/// checkpoint + metrics output into `out_dir`.
pub fn run_reconstruction(
    dataset: &Dataset,
    cfg: &ReconConfig,
    out_dir: &Path,
) -> Result<ReconOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = Instant::now();
    let mut state = TrainState::new(dataset, cfg)?;
    let mut rows = Vec::new();
    let mut running_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch = make_batch(dataset, &mut state, cfg);
        let loss = train_step(&mut state, dataset, &batch, cfg)?;
        running_loss = if running_loss.is_finite() {
            0.9 * running_loss + 0.1 * loss
        } else {
            loss
        };
        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_interval == 0 || last {
            let (val_psnr, val_ssim) =
                evaluate_validation(&state.field, state.occupancy.as_ref(), dataset, cfg)?;
            rows.push(MetricsRow {
                step: step + 1,
                loss: running_loss,
                lr: lr_at(step, cfg),
                aperture: state.aperture,
                focus: state.focus,
                val_psnr,
                val_ssim,
            });
            log::info!(
                "step {:>6}: loss {:.4e} psnr {:.2} ssim {:.4} a_R {:.5e} z_f {:.5e}",
                step + 1,
                running_loss,
                val_psnr,
                val_ssim,
                state.aperture,
                state.focus
            );
        }
    }
    crate::io::save_checkpoint(&out_dir.join("field.ckpt"), &state.field)?;
    crate::io::write_text(&out_dir.join("metrics.csv"), &metrics_csv(&rows))?;
    let last = rows.last().cloned().ok_or_else(|| {
        Error::domain("reconstruction produced no metrics rows (eval interval too large?)")
    })?;
    Ok(ReconOutcome {
        aperture: state.aperture,
        focus: state.focus,
        val_psnr: last.val_psnr,
        val_ssim: last.val_ssim,
        rows,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::io::DatasetView;
    use crate::render::LinearImage;
    use crate::scenegen::{bake_scene, make_hemisphere_cameras, DatasetSpec, SceneSpec};
    use crate::Vec3;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&Rgb::new(0.0, 0.0, 0.0)), 0.0);
        assert_eq!(smooth_l1(&Rgb::new(0.5, 0.0, 0.0)), 0.25);
        assert_eq!(smooth_l1(&Rgb::new(2.0, 0.0, 0.0)), 2.0);
        // Value-continuous at the kink.
        assert_eq!(smooth_l1(&Rgb::new(1.0, 0.0, 0.0)), 1.0);
        // Summed over channels.
        assert_eq!(smooth_l1(&Rgb::new(0.5, -0.5, 2.0)), 2.5);
        assert_eq!(
            smooth_l1_grad(&Rgb::new(0.25, -3.0, 0.0)),
            Rgb::new(0.5, -1.0, 0.0)
        );
    }

    fn schedule_cfg(steps: usize) -> ReconConfig {
        ReconConfig {
            steps,
            lr: 1.0,
            decay_factor: 0.33,
            ..ReconConfig::default()
        }
    }

    #[test]
    fn lr_schedule_two_reductions() {
        let cfg = schedule_cfg(1000);
        assert_eq!(cfg.schedule(), [600, 800]);
        assert_eq!(lr_at(0, &cfg), 1.0);
        assert_eq!(lr_at(599, &cfg), 1.0);
        assert_eq!(lr_at(600, &cfg), 0.33);
        assert_eq!(lr_at(799, &cfg), 0.33);
        let last = lr_at(999, &cfg);
        assert!((last - 0.33 * 0.33).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..1000 {
            let lr = lr_at(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    /// In-memory dataset: a baked scene rendered from a few hemisphere
    /// cameras, defocused train views plus pinhole val views.
    fn tiny_dataset(
        scene: &SceneSpec,
        bake_res: usize,
        width: u32,
        train: usize,
        val: usize,
        rpp: usize,
    ) -> (Dataset, VoxelField) {
        let field = bake_scene(scene, [bake_res; 3]).unwrap();
        let ds_spec = DatasetSpec {
            train_count: train,
            val_count: val,
            width,
            height: width,
            gt_rays_per_pixel: rpp,
            step_size: 3e-3,
            ..DatasetSpec::desk_default()
        };
        let cams = make_hemisphere_cameras(&ds_spec).unwrap();
        let bounds = crate::scenegen::scene_bounds(&ds_spec, &scene.bbox);
        let mut views = Vec::new();
        for (i, mut cam) in cams.into_iter().enumerate() {
            let split = if i < train { Split::Train } else { Split::Val };
            if split == Split::Val {
                cam.aperture_radius = 0.0;
            }
            let cfg = RenderConfig {
                rays_per_pixel: if split == Split::Val { 1 } else { rpp },
                step_size: 3e-3,
                bounds,
                max_samples_per_ray: 2048,
                background: Rgb::zeros(),
                use_occupancy: false,
                min_transmittance: crate::render::TRANSMITTANCE_EPS,
                seed: 17 + i as u64,
                serial: false,
            };
            let img = render_image(&field, None, &cam, &cfg).unwrap();
            views.push(DatasetView {
                name: format!("{}_{i:03}", split.as_str()),
                split,
                camera: cam,
                target: img,
            });
        }
        (
            Dataset {
                scene: scene.name.clone(),
                bbox: scene.bbox,
                aperture_radius: ds_spec.aperture_radius(),
                focus_distance: ds_spec.focus_distance,
                focal_length: ds_spec.focal_length,
                views,
            },
            field,
        )
    }

    #[test]
    fn batch_sizing_matches_sample_target() {
        let (dataset, _) = tiny_dataset(&SceneSpec::desk_box(), 16, 16, 2, 1, 1);
        let mut cfg = ReconConfig {
            sample_point_target: 262_144,
            rays_per_pixel: 1,
            grid_resolution: [16, 16, 16],
            ..ReconConfig::default()
        };
        cfg.serial = true;
        let mut state = TrainState::new(&dataset, &cfg).unwrap();
        state.avg_samples_per_ray = 256.0;
        let batch = make_batch(&dataset, &mut state, &cfg);
        assert_eq!(batch.len(), 1024);
    }

    #[test]
    fn batch_stream_is_deterministic() {
        let (dataset, _) = tiny_dataset(&SceneSpec::desk_box(), 16, 16, 2, 1, 1);
        let cfg = ReconConfig {
            grid_resolution: [16, 16, 16],
            fixed_pixels_per_batch: Some(64),
            seed: 99,
            ..ReconConfig::default()
        };
        let mut a = TrainState::new(&dataset, &cfg).unwrap();
        let mut b = TrainState::new(&dataset, &cfg).unwrap();
        for _ in 0..3 {
            let ba = make_batch(&dataset, &mut a, &cfg);
            let bb = make_batch(&dataset, &mut b, &cfg);
            for (x, y) in ba.iter().zip(&bb) {
                assert_eq!((x.view, x.px), (y.view, y.px));
                assert_eq!(x.target, y.target);
            }
        }
    }

    #[test]
    fn sparse_scene_gets_bigger_batches_than_dense() {
        // Sparse: one small sphere; occupancy skips nearly every sample.
        let bbox = Aabb::new(Vec3::new(-0.15, -0.15, -0.15), Vec3::new(0.15, 0.15, 0.15))
            .unwrap();
        let sparse = SceneSpec {
            name: "sparse".into(),
            bbox,
            primitives: vec![crate::scenegen::Primitive::Sphere {
                center: Vec3::zeros(),
                radius: 0.02,
                density: 200.0,
                color: Rgb::new(0.8, 0.2, 0.2),
            }],
        };
        // Dense: fog filling the whole box; every sample is evaluated.
        let dense = SceneSpec {
            name: "dense".into(),
            bbox,
            primitives: vec![crate::scenegen::Primitive::Box {
                min: Vec3::new(-0.149, -0.149, -0.149),
                max: Vec3::new(0.149, 0.149, 0.149),
                density: 2.0,
                color: Rgb::new(0.4, 0.5, 0.6),
            }],
        };
        let cfg = ReconConfig {
            grid_resolution: [24, 24, 24],
            sample_point_target: 65_536,
            rays_per_pixel: 2,
            use_occupancy: true,
            serial: true,
            ..ReconConfig::default()
        };
        let mut sizes = Vec::new();
        for scene in [&sparse, &dense] {
            let (dataset, gt) = tiny_dataset(scene, 24, 16, 2, 1, 2);
            let mut state = TrainState::new(&dataset, &cfg).unwrap();
            // Train against the ground-truth field so marching sees the
            // real occupancy structure.
            state.field = gt;
            state.occupancy = Some(
                rebuild_occupancy(&state.field, cfg.occupancy_threshold).unwrap(),
            );
            let batch = make_batch(&dataset, &mut state, &cfg);
            train_step(&mut state, &dataset, &batch, &cfg).unwrap();
            let next = make_batch(&dataset, &mut state, &cfg);
            sizes.push(next.len());
        }
        assert!(
            sizes[0] > sizes[1],
            "sparse batch {} should exceed dense batch {}",
            sizes[0],
            sizes[1]
        );
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (dataset, _) = tiny_dataset(&SceneSpec::desk_box(), 16, 16, 2, 1, 1);
        let cfg = ReconConfig {
            grid_resolution: [16, 16, 16],
            lr: 0.0,
            defocus_lr: 0.0,
            optimize_aperture: true,
            optimize_focus: true,
            fixed_pixels_per_batch: Some(32),
            serial: true,
            use_occupancy: false,
            ..ReconConfig::default()
        };
        let mut state = TrainState::new(&dataset, &cfg).unwrap();
        let density_before = state.field.density_raw().to_vec();
        let aperture_before = state.aperture;
        let focus_before = state.focus;
        let batch = make_batch(&dataset, &mut state, &cfg);
        train_step(&mut state, &dataset, &batch, &cfg).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(state.field.density_raw(), density_before.as_slice());
        assert_eq!(state.aperture, aperture_before);
        assert_eq!(state.focus, focus_before);
    }

    /// A perfect field with matching defocus parameters is a stationary
    /// point: with targets rendered by the same estimator and seeds, the
    /// residual is exactly zero and nothing moves.
    #[test]
    fn perfect_field_is_stationary() {
        let scene = SceneSpec::desk_box();
        let gt = bake_scene(&scene, [24; 3]).unwrap();
        let ds_spec = DatasetSpec {
            train_count: 2,
            val_count: 1,
            width: 16,
            height: 16,
            ..DatasetSpec::desk_default()
        };
        let cams = make_hemisphere_cameras(&ds_spec).unwrap();
        let cfg = ReconConfig {
            grid_resolution: [24, 24, 24],
            rays_per_pixel: 2,
            fixed_pixels_per_batch: Some(40),
            use_occupancy: false,
            serial: true,
            seed: 3,
            step_size: 3e-3,
            optimize_aperture: true,
            optimize_focus: true,
            ..ReconConfig::default()
        };
        // Targets must come from the *same* estimator the trainer uses:
        // same seeds, rays, bounds.
        let mut views = Vec::new();
        for (i, cam) in cams.into_iter().enumerate() {
            let split = if i < 2 { Split::Train } else { Split::Val };
            views.push(DatasetView {
                name: format!("v{i}"),
                split,
                camera: cam,
                target: LinearImage::new(16, 16),
            });
        }
        let mut dataset = Dataset {
            scene: scene.name.clone(),
            bbox: scene.bbox,
            aperture_radius: ds_spec.aperture_radius(),
            focus_distance: ds_spec.focus_distance,
            focal_length: ds_spec.focal_length,
            views,
        };
        let bounds = dataset_bounds(&dataset);
        let mut state = TrainState::new(&dataset, &cfg).unwrap();
        state.field = gt.clone();
        let render_cfg = state.render_cfg(bounds, cfg.rays_per_pixel, &cfg);
        for view in &mut dataset.views {
            let mut cam = view.camera.clone();
            cam.aperture_radius = state.aperture;
            cam.focus_distance = state.focus;
            view.target = render_image(&gt, None, &cam, &render_cfg).unwrap();
        }
        let density_before = state.field.density_raw().to_vec();
        let batch = make_batch(&dataset, &mut state, &cfg);
        let loss = train_step(&mut state, &dataset, &batch, &cfg).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
        assert_eq!(state.field.density_raw(), density_before.as_slice());
        assert!((state.aperture - dataset.aperture_radius).abs() < 1e-6);
        assert!((state.focus - dataset.focus_distance).abs() < 1e-6);
    }

    #[test]
    fn defocus_parameters_stay_feasible() {
        let (dataset, _) = tiny_dataset(&SceneSpec::desk_box(), 16, 16, 2, 1, 2);
        let cfg = ReconConfig {
            grid_resolution: [16, 16, 16],
            // Absurd rate: every step overshoots, the projection must hold.
            defocus_lr: 1e4,
            optimize_aperture: true,
            optimize_focus: true,
            fixed_pixels_per_batch: Some(24),
            serial: true,
            use_occupancy: false,
            rays_per_pixel: 2,
            ..ReconConfig::default()
        };
        let mut state = TrainState::new(&dataset, &cfg).unwrap();
        for _ in 0..4 {
            let batch = make_batch(&dataset, &mut state, &cfg);
            train_step(&mut state, &dataset, &batch, &cfg).unwrap();
            assert!(state.aperture >= 0.0);
            assert!(state.focus > dataset.focal_length);
        }
    }

    #[test]
    fn training_reduces_loss_on_desk_box() {
        let (dataset, _) = tiny_dataset(&SceneSpec::desk_box(), 32, 24, 4, 1, 4);
        let cfg = ReconConfig {
            grid_resolution: [32, 32, 32],
            lr: 5e-2,
            steps: 500,
            rays_per_pixel: 2,
            sample_point_target: 16_384,
            use_occupancy: true,
            occupancy_interval: 50,
            serial: false,
            seed: 11,
            step_size: 3e-3,
            ..ReconConfig::default()
        };
        let mut state = TrainState::new(&dataset, &cfg).unwrap();
        let mut loss_at_50 = f64::NAN;
        let mut window = Vec::new();
        for step in 0..500 {
            let batch = make_batch(&dataset, &mut state, &cfg);
            let loss = train_step(&mut state, &dataset, &batch, &cfg).unwrap();
            window.push(loss);
            if window.len() > 10 {
                window.remove(0);
            }
            if step + 1 == 50 {
                loss_at_50 = window.iter().sum::<f64>() / window.len() as f64;
            }
        }
        let loss_at_500 = window.iter().sum::<f64>() / window.len() as f64;
        assert!(
            loss_at_500 < 0.5 * loss_at_50,
            "loss only fell from {loss_at_50:.4e} to {loss_at_500:.4e}"
        );
    }

    #[test]
    fn rpp_doubling_walks_epochs() {
        let (dataset, _) = tiny_dataset(&SceneSpec::desk_box(), 16, 16, 2, 1, 1);
        let cfg = ReconConfig {
            grid_resolution: [16, 16, 16],
            rays_per_pixel: 8,
            rpp_doubling: true,
            fixed_pixels_per_batch: Some(256),
            ..ReconConfig::default()
        };
        let mut state = TrainState::new(&dataset, &cfg).unwrap();
        // Epoch = 2 train views * 256 pixels = 512 pixels.
        assert_eq!(state.current_rays_per_pixel(&dataset, &cfg), 1);
        let _ = make_batch(&dataset, &mut state, &cfg); // 256 consumed
        assert_eq!(state.current_rays_per_pixel(&dataset, &cfg), 1);
        let _ = make_batch(&dataset, &mut state, &cfg); // 512 consumed
        assert_eq!(state.current_rays_per_pixel(&dataset, &cfg), 2);
        for _ in 0..2 {
            let _ = make_batch(&dataset, &mut state, &cfg);
        }
        assert_eq!(state.current_rays_per_pixel(&dataset, &cfg), 4);
        for _ in 0..10 {
            let _ = make_batch(&dataset, &mut state, &cfg);
        }
        // Capped at the configured maximum.
        assert_eq!(state.current_rays_per_pixel(&dataset, &cfg), 8);
    }
}
