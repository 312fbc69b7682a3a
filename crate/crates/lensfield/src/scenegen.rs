//! Synthetic ground truth: analytic scenes baked into voxel fields, and
//! fabrication of defocused training sets with all-in-focus validation
//! views.
//!
//! The default `occluder` scene is a desk-scale arrangement with a sharp
//! foreground edge in front of a striped floor, so background seen past the
//! edge is strongly defocused while the foreground stays near the focus
//! plane. That is the partial-occlusion regime a finite-aperture model has
//! to explain and a pinhole model cannot.

use crate::error::{Error, Result};
use crate::field::{sigmoid_inv, softplus_inv, Aabb, VoxelField};
use crate::io::{self, Manifest, ManifestEntry, Split};
use crate::optics::{Camera, RayBounds};
use crate::render::{render_image, RenderConfig};
use crate::{Mat3, Rgb, Vec3};
use std::path::Path;

/// Analytic primitive with constant density and linear color.
#[derive(Debug, Clone)]
pub enum Primitive {
    Box {
        min: Vec3,
        max: Vec3,
        density: f64,
        color: Rgb,
    },
    Sphere {
        center: Vec3,
        radius: f64,
        density: f64,
        color: Rgb,
    },
}

impl Primitive {
    fn density(&self) -> f64 {
        match self {
            Primitive::Box { density, .. } | Primitive::Sphere { density, .. } => *density,
        }
    }

    fn color(&self) -> Rgb {
        match self {
            Primitive::Box { color, .. } | Primitive::Sphere { color, .. } => *color,
        }
    }

    fn contains(&self, p: &Vec3) -> bool {
        match self {
            Primitive::Box { min, max, .. } => {
                p.x >= min.x
                    && p.x <= max.x
                    && p.y >= min.y
                    && p.y <= max.y
                    && p.z >= min.z
                    && p.z <= max.z
            }
            Primitive::Sphere { center, radius, .. } => (p - center).norm_squared() <= radius * radius,
        }
    }

    fn inside_bbox(&self, bbox: &Aabb) -> bool {
        match self {
            Primitive::Box { min, max, .. } => bbox.contains(min) && bbox.contains(max),
            Primitive::Sphere { center, radius, .. } => {
                let r = Vec3::new(*radius, *radius, *radius);
                bbox.contains(&(center - r)) && bbox.contains(&(center + r))
            }
        }
    }
}

/// An analytic scene description.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub name: String,
    pub bbox: Aabb,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density() >= 0.0) {
                return Err(Error::domain(format!(
                    "primitive {i} has negative density"
                )));
            }
            if !p.inside_bbox(&self.bbox) {
                return Err(Error::domain(format!(
                    "primitive {i} does not fit inside the scene bounding box"
                )));
            }
        }
        Ok(())
    }

    /// Desk-scale scene with a tall occluder in front of a striped floor
    /// plus two smaller objects, in a 0.3 m box. The foreground edge sits
    /// near the focus plane; the floor behind it is well off-focus.
    pub fn occluder() -> SceneSpec {
        let opaque = 400.0;
        let mut primitives = Vec::new();
        // Striped floor, four colors.
        let stripe_colors = [
            Rgb::new(0.85, 0.15, 0.12),
            Rgb::new(0.92, 0.88, 0.80),
            Rgb::new(0.15, 0.35, 0.85),
            Rgb::new(0.88, 0.75, 0.15),
        ];
        for (i, color) in stripe_colors.iter().enumerate() {
            let x0 = -0.14 + 0.07 * i as f64;
            primitives.push(Primitive::Box {
                min: Vec3::new(x0, -0.14, -0.14),
                max: Vec3::new(x0 + 0.07, 0.14, -0.11),
                density: opaque,
                color: *color,
            });
        }
        // Tall occluder whose right edge (x = 0.02) hangs over the floor.
        primitives.push(Primitive::Box {
            min: Vec3::new(-0.10, -0.045, -0.11),
            max: Vec3::new(0.02, 0.045, 0.055),
            density: opaque,
            color: Rgb::new(0.18, 0.75, 0.30),
        });
        // Sphere to the side.
        primitives.push(Primitive::Sphere {
            center: Vec3::new(0.075, -0.07, -0.075),
            radius: 0.036,
            density: opaque,
            color: Rgb::new(0.95, 0.55, 0.12),
        });
        // Floating bar: a second occlusion edge above the floor.
        primitives.push(Primitive::Box {
            min: Vec3::new(-0.02, 0.065, -0.03),
            max: Vec3::new(0.125, 0.10, 0.0),
            density: opaque,
            color: Rgb::new(0.55, 0.20, 0.80),
        });
        SceneSpec {
            name: "occluder".into(),
            bbox: Aabb::new(Vec3::new(-0.15, -0.15, -0.15), Vec3::new(0.15, 0.15, 0.15))
                .unwrap(),
            primitives,
        }
    }

    /// The occluder layout at moderate density. Edges stay soft at the
    /// voxel scale, which keeps fixed-step finite differences of renders
    /// meaningful; used by the gradient-check protocols.
    pub fn soft_occluder() -> SceneSpec {
        let mut scene = SceneSpec::occluder();
        scene.name = "soft_occluder".into();
        for p in &mut scene.primitives {
            match p {
                Primitive::Box { density, .. } | Primitive::Sphere { density, .. } => {
                    *density = 25.0;
                }
            }
        }
        scene
    }

    /// Single colored box on a floor; the small smoke-test scene.
    pub fn desk_box() -> SceneSpec {
        let opaque = 400.0;
        SceneSpec {
            name: "desk_box".into(),
            bbox: Aabb::new(Vec3::new(-0.15, -0.15, -0.15), Vec3::new(0.15, 0.15, 0.15))
                .unwrap(),
            primitives: vec![
                Primitive::Box {
                    min: Vec3::new(-0.14, -0.14, -0.14),
                    max: Vec3::new(0.14, 0.14, -0.11),
                    density: opaque,
                    color: Rgb::new(0.85, 0.85, 0.9),
                },
                Primitive::Box {
                    min: Vec3::new(-0.06, -0.06, -0.11),
                    max: Vec3::new(0.06, 0.06, 0.03),
                    density: opaque,
                    color: Rgb::new(0.8, 0.25, 0.2),
                },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<SceneSpec> {
        match name {
            "occluder" => Ok(SceneSpec::occluder()),
            "soft_occluder" => Ok(SceneSpec::soft_occluder()),
            "desk_box" => Ok(SceneSpec::desk_box()),
            other => Err(Error::config(format!("unknown scene '{other}'"))),
        }
    }
}

/// Smallest activated density a baked field stores for empty space.
const BAKE_SIGMA_FLOOR: f64 = 1e-8;
const BAKE_COLOR_EPS: f64 = 1e-6;

/// Rasterizes the scene into raw field parameters.
///
/// Each corner parameter is set from the coverage of the corner's dual cell,
/// estimated with 8 sub-samples (2 per axis): the activated density target
/// is the coverage-weighted sum of primitive densities, inverted through the
/// activation into raw parameter space. Corners fully inside or outside a
/// primitive are exact; boundary corners are correct to the sub-sample
/// quantization of 1/8.
pub fn bake_scene(spec: &SceneSpec, resolution: [usize; 3]) -> Result<VoxelField> {
    spec.validate()?;
    let mut field = VoxelField::new(resolution, spec.bbox)?;
    let e = spec.bbox.extent();
    let voxel = Vec3::new(
        e.x / resolution[0] as f64,
        e.y / resolution[1] as f64,
        e.z / resolution[2] as f64,
    );
    let (nx, ny, nz) = (resolution[0] + 1, resolution[1] + 1, resolution[2] + 1);
    let corner_index = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;

    let mut density_target = vec![0.0f64; nx * ny * nz];
    let mut color_target = vec![Rgb::zeros(); nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let corner = Vec3::new(
                    spec.bbox.min.x + voxel.x * x as f64,
                    spec.bbox.min.y + voxel.y * y as f64,
                    spec.bbox.min.z + voxel.z * z as f64,
                );
                let mut sigma = 0.0;
                let mut weighted_color = Rgb::zeros();
                for prim in &spec.primitives {
                    let mut hits = 0u32;
                    for k in 0..8u32 {
                        let sub = Vec3::new(
                            corner.x + voxel.x * (if k & 1 == 1 { 0.25 } else { -0.25 }),
                            corner.y + voxel.y * (if k & 2 == 2 { 0.25 } else { -0.25 }),
                            corner.z + voxel.z * (if k & 4 == 4 { 0.25 } else { -0.25 }),
                        );
                        if prim.contains(&sub) {
                            hits += 1;
                        }
                    }
                    let coverage = hits as f64 / 8.0;
                    let w = coverage * prim.density();
                    sigma += w;
                    weighted_color += prim.color() * w;
                }
                let idx = corner_index(x, y, z);
                density_target[idx] = sigma;
                color_target[idx] = if sigma > 0.0 {
                    weighted_color / sigma
                } else {
                    Rgb::new(0.5, 0.5, 0.5)
                };
            }
        }
    }

    let (density, color) = field.params_mut();
    for idx in 0..density.len() {
        density[idx] = softplus_inv(density_target[idx].max(BAKE_SIGMA_FLOOR));
        for ch in 0..3 {
            let c = color_target[idx][ch].clamp(BAKE_COLOR_EPS, 1.0 - BAKE_COLOR_EPS);
            color[idx * 3 + ch] = sigmoid_inv(c);
        }
    }
    Ok(field)
}

/// How to specify the lens opening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApertureSpec {
    /// Aperture radius in meters.
    Radius(f64),
    /// Photographic f-number N; converts as `a_R = f / (2 N)`.
    FNumber(f64),
}

impl ApertureSpec {
    pub fn radius(&self, focal_length: f64) -> f64 {
        match self {
            ApertureSpec::Radius(r) => *r,
            ApertureSpec::FNumber(n) => focal_length / (2.0 * n),
        }
    }
}

/// Capture protocol: camera placement, optics, image size, split, seed.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub train_count: usize,
    pub val_count: usize,
    /// Camera distance from the scene origin, meters.
    pub hemisphere_radius: f64,
    pub width: u32,
    pub height: u32,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub focal_length: f64,
    pub focus_distance: f64,
    pub aperture: ApertureSpec,
    pub seed: u64,
    /// Rays per pixel for the defocused ground-truth renders.
    pub gt_rays_per_pixel: usize,
    /// Marching step for fabrication renders, meters.
    pub step_size: f64,
    /// Voxel resolution the analytic scene is baked at.
    pub bake_resolution: usize,
}

impl DatasetSpec {
    /// Desk-scale default: 40 train + 8 val views at 128x128, a fast lens
    /// focused slightly in front of the scene center.
    pub fn desk_default() -> DatasetSpec {
        DatasetSpec {
            train_count: 40,
            val_count: 8,
            hemisphere_radius: 0.45,
            width: 128,
            height: 128,
            fov_deg: 25.0,
            focal_length: 0.05,
            focus_distance: 0.40,
            aperture: ApertureSpec::Radius(0.02),
            seed: 1,
            gt_rays_per_pixel: 128,
            step_size: 1.5e-3,
            bake_resolution: 160,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.val_count == 0 {
            return Err(Error::domain("train and val counts must be positive"));
        }
        if !(self.hemisphere_radius > 0.0) {
            return Err(Error::domain("hemisphere radius must be positive"));
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 175.0) {
            return Err(Error::domain("field of view out of range"));
        }
        Ok(())
    }

    pub fn aperture_radius(&self) -> f64 {
        self.aperture.radius(self.focal_length)
    }
}

/// Rotation whose +z axis looks from `position` at the origin, built with a
/// world-up hint; +y is the camera's pixel-down direction.
fn look_at_origin(position: &Vec3) -> Mat3 {
    let forward = (-position).normalize();
    let mut up = Vec3::new(0.0, 0.0, 1.0);
    if forward.dot(&up).abs() > 0.999 {
        up = Vec3::new(0.0, 1.0, 0.0);
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    Mat3::from_columns(&[right, down, forward])
}

/// Deterministic Fibonacci-spiral placement on the upper hemisphere, all
/// cameras at `hemisphere_radius` from the origin and looking at it.
pub fn make_hemisphere_cameras(spec: &DatasetSpec) -> Result<Vec<Camera>> {
    spec.validate()?;
    let total = spec.train_count + spec.val_count;
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let fx = 0.5 * spec.width as f64 / (spec.fov_deg.to_radians() * 0.5).tan();
    let mut cams = Vec::with_capacity(total);
    for k in 0..total {
        // Elevation spread over (0, 1): never exactly at the pole.
        let zu = 0.08 + 0.88 * (k as f64 + 0.5) / total as f64;
        let r_xy = (1.0 - zu * zu).sqrt();
        let phi = k as f64 * golden;
        let position = Vec3::new(r_xy * phi.cos(), r_xy * phi.sin(), zu) * spec.hemisphere_radius;
        let cam = Camera {
            width: spec.width,
            height: spec.height,
            fx,
            fy: fx,
            cx: spec.width as f64 * 0.5,
            cy: spec.height as f64 * 0.5,
            rotation: look_at_origin(&position),
            translation: position,
            aperture_radius: spec.aperture_radius(),
            focal_length: spec.focal_length,
            focus_distance: spec.focus_distance,
        };
        cam.validate()?;
        cams.push(cam);
    }
    Ok(cams)
}

/// Marching bounds that cover the whole scene box from a hemisphere camera.
pub fn scene_bounds(spec: &DatasetSpec, bbox: &Aabb) -> RayBounds {
    let half_diag = bbox.extent().norm() * 0.5;
    let near = (spec.hemisphere_radius - half_diag * 1.2).max(1e-3);
    let far = spec.hemisphere_radius + half_diag * 1.2;
    RayBounds {
        t_near: near,
        t_far: far,
    }
}

/// Indices assigned to the validation split: spread evenly over the spiral.
fn val_indices(train: usize, val: usize) -> Vec<usize> {
    let total = train + val;
    (0..val).map(|j| (j * total + total / 2) / val % total).collect()
}

/// Renders and writes a full dataset: defocused training views (sRGB PNG +
/// linear PFM), all-in-focus pinhole validation views from held-out poses,
/// per-view camera files, the ground-truth field checkpoint, and a manifest.
pub fn fabricate_dataset(scene: &SceneSpec, spec: &DatasetSpec, out_dir: &Path) -> Result<()> {
    spec.validate()?;
    let field = bake_scene(scene, [spec.bake_resolution; 3])?;
    let occupancy = crate::field::rebuild_occupancy(&field, 1e-3)?;
    let cameras = make_hemisphere_cameras(spec)?;
    let val_set: std::collections::BTreeSet<usize> =
        val_indices(spec.train_count, spec.val_count).into_iter().collect();

    std::fs::create_dir_all(out_dir.join("cameras")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;

    let bounds = scene_bounds(spec, &scene.bbox);
    let mut entries = Vec::with_capacity(cameras.len());
    for (idx, mut cam) in cameras.into_iter().enumerate() {
        let split = if val_set.contains(&idx) {
            Split::Val
        } else {
            Split::Train
        };
        if split == Split::Val {
            // Validation is the all-in-focus reference: pinhole renders.
            cam.aperture_radius = 0.0;
        }
        let cfg = RenderConfig {
            rays_per_pixel: if split == Split::Val {
                1
            } else {
                spec.gt_rays_per_pixel
            },
            step_size: spec.step_size,
            bounds,
            max_samples_per_ray: 4096,
            background: Rgb::zeros(),
            use_occupancy: true,
            min_transmittance: crate::render::TRANSMITTANCE_EPS,
            seed: spec.seed.wrapping_add(idx as u64),
            serial: false,
        };
        let img = render_image(&field, Some(&occupancy), &cam, &cfg)?;
        let name = format!("{}_{idx:03}", split.as_str());
        let camera_path = format!("cameras/cam_{idx:03}.txt");
        let png_path = format!("images/{name}.png");
        let pfm_path = format!("images/{name}.pfm");
        io::save_camera(&out_dir.join(&camera_path), &cam)?;
        io::write_png_srgb(&out_dir.join(&png_path), &img)?;
        io::write_pfm(&out_dir.join(&pfm_path), &img)?;
        entries.push(ManifestEntry {
            index: idx,
            split,
            camera_path: camera_path.into(),
            image_srgb: png_path.into(),
            image_linear: pfm_path.into(),
        });
    }

    io::save_checkpoint(&out_dir.join("field_gt.ckpt"), &field)?;
    let manifest = Manifest {
        scene: scene.name.clone(),
        bbox: scene.bbox,
        aperture_radius: spec.aperture_radius(),
        focus_distance: spec.focus_distance,
        focal_length: spec.focal_length,
        entries,
    };
    io::save_manifest(&out_dir.join("manifest.txt"), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::softplus;
    use approx::assert_relative_eq;

    #[test]
    fn empty_scene_renders_background() {
        let spec = SceneSpec {
            name: "empty".into(),
            bbox: Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap(),
            primitives: vec![],
        };
        let field = bake_scene(&spec, [8, 8, 8]).unwrap();
        let cfg = RenderConfig {
            background: Rgb::new(0.3, 0.5, 0.7),
            bounds: RayBounds {
                t_near: 0.01,
                t_far: 10.0,
            },
            serial: true,
            ..RenderConfig::default()
        };
        let cam = Camera {
            width: 4,
            height: 4,
            fx: 8.0,
            fy: 8.0,
            cx: 2.0,
            cy: 2.0,
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, 0.0, -3.0),
            aperture_radius: 0.0,
            focal_length: 0.05,
            focus_distance: 3.0,
        };
        let img = render_image(&field, None, &cam, &cfg).unwrap();
        for p in img.pixels() {
            assert!((p - cfg.background).norm() < 1e-6);
        }
    }

    #[test]
    fn full_box_bakes_exact_density() {
        let bbox = Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let spec = SceneSpec {
            name: "full".into(),
            bbox,
            primitives: vec![Primitive::Box {
                min: bbox.min,
                max: bbox.max,
                density: 50.0,
                color: Rgb::new(0.25, 0.5, 0.75),
            }],
        };
        let field = bake_scene(&spec, [6, 6, 6]).unwrap();
        // Interior corners are fully covered (boundary corners' dual cells
        // stick out of the primitive).
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    let idx = field.corner_index(x, y, z);
                    let sigma = softplus(field.density_raw()[idx]);
                    assert_relative_eq!(sigma, 50.0, epsilon = 1e-4);
                }
            }
        }
        let s = field.query(&Vec3::new(0.5, 0.5, 0.5)).unwrap();
        assert_relative_eq!(s.sigma, 50.0, epsilon = 1e-4);
        assert_relative_eq!(s.color.x, 0.25, epsilon = 1e-5);
    }

    #[test]
    fn half_covered_corner_within_subsample_quantization() {
        let bbox = Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        // Box occupying the lower half in x, boundary exactly at x = 0.5,
        // which is a corner of the 4^3 grid.
        let spec = SceneSpec {
            name: "half".into(),
            bbox,
            primitives: vec![Primitive::Box {
                min: Vec3::new(0.0, 0.0, 0.0),
                max: Vec3::new(0.5, 1.0, 1.0),
                density: 8.0,
                color: Rgb::new(0.5, 0.5, 0.5),
            }],
        };
        let field = bake_scene(&spec, [4, 4, 4]).unwrap();
        let idx = field.corner_index(2, 2, 2); // corner at x = 0.5
        let sigma = softplus(field.density_raw()[idx]);
        let coverage = sigma / 8.0;
        assert!(
            (coverage - 0.5).abs() <= 0.125 + 1e-9,
            "coverage {coverage} not within 1/8 of 0.5"
        );
    }

    #[test]
    fn primitive_outside_bbox_rejected() {
        let bbox = Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let spec = SceneSpec {
            name: "bad".into(),
            bbox,
            primitives: vec![Primitive::Sphere {
                center: Vec3::new(0.9, 0.5, 0.5),
                radius: 0.3,
                density: 1.0,
                color: Rgb::new(0.5, 0.5, 0.5),
            }],
        };
        assert!(bake_scene(&spec, [4, 4, 4]).is_err());
    }

    #[test]
    fn hemisphere_cameras_at_radius_looking_at_origin() {
        let spec = DatasetSpec::desk_default();
        let cams = make_hemisphere_cameras(&spec).unwrap();
        assert_eq!(cams.len(), 48);
        for cam in &cams {
            assert!((cam.translation.norm() - spec.hemisphere_radius).abs() < 1e-9);
            // The optical axis passes through the origin.
            let axis = cam.optical_axis();
            let to_origin = -cam.translation;
            let cross = axis.cross(&to_origin).norm();
            assert!(cross < 1e-9, "axis misses origin by {cross}");
            assert!(cam.translation.z > 0.0, "camera below the hemisphere");
            cam.validate().unwrap();
        }
    }

    #[test]
    fn f_number_conversion() {
        let spec = DatasetSpec {
            aperture: ApertureSpec::FNumber(5.0),
            ..DatasetSpec::desk_default()
        };
        assert_relative_eq!(spec.aperture_radius(), 0.005, epsilon = 1e-12);
    }

    #[test]
    fn default_occluder_background_blur_exceeds_4px() {
        let scene = SceneSpec::occluder();
        let spec = DatasetSpec::desk_default();
        let cams = make_hemisphere_cameras(&spec).unwrap();
        // Depth of a background point behind the occluder edge: scene
        // content extends 0.1 m beyond the focus-side of the box center.
        let background_depth = spec.hemisphere_radius + 0.10;
        assert!(scene.bbox.extent().norm() * 0.5 > 0.10);
        for cam in &cams {
            let px = cam.blur_radius_px(background_depth).unwrap();
            assert!(px > 4.0, "background blur only {px:.2} px");
        }
    }

    #[test]
    fn val_indices_disjoint_and_spread() {
        let idx = val_indices(40, 8);
        assert_eq!(idx.len(), 8);
        let set: std::collections::BTreeSet<_> = idx.iter().collect();
        assert_eq!(set.len(), 8, "duplicate val indices");
        for i in &idx {
            assert!(*i < 48);
        }
    }
}
