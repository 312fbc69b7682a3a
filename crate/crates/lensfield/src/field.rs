//! Dense voxel radiance field.
//!
//! The scene is a regular grid of trainable parameters stored at voxel
//! corners: one pre-activation density scalar and three pre-activation color
//! scalars per corner. Queries trilinearly interpolate the raw parameters
//! and then apply softplus (density) / sigmoid (color), so the activated
//! field is smooth inside every cell and gradients stay well-behaved for
//! finite-difference checks. Outside the bounding box the density is zero.
//!
//! `query_grad` is the hand-written backward of `query`: it scatters the
//! chain-rule contributions onto the eight corner parameters and returns the
//! spatial gradient needed to differentiate through ray positions.

use crate::error::{Error, Result};
use crate::{Rgb, Vec3};

/// Axis-aligned box in world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::domain(format!(
                "degenerate bounding box: min {min:?} max {max:?}"
            )));
        }
        Ok(Aabb { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Slab-test intersection with a ray; returns the `t` interval or `None`.
    pub fn ray_range(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let o = origin[axis];
            let d = dir[axis];
            if d.abs() < 1e-300 {
                if o < self.min[axis] || o > self.max[axis] {
                    return None;
                }
            } else {
                let inv = 1.0 / d;
                let mut a = (self.min[axis] - o) * inv;
                let mut b = (self.max[axis] - o) * inv;
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                t0 = t0.max(a);
                t1 = t1.min(b);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus.
pub fn softplus_prime(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of softplus, defined for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1); exact for large y, stable for small y.
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of sigmoid (logit), defined for p in (0, 1).
pub fn sigmoid_inv(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A density + color sample of the activated field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: Rgb,
}

/// The eight corners of the cell containing a point, with trilinear weights.
/// Corner `k` has offset bits `(k & 1, k >> 1 & 1, k >> 2 & 1)`.
struct CellWeights {
    /// Corner index into the flattened lattice and its trilinear weight.
    corners: [(usize, f64); 8],
    /// Per-axis fractional position inside the cell.
    frac: [f64; 3],
    /// Per-axis world-to-cell scale (voxels per meter).
    scale: [f64; 3],
}

/// Dense voxel grid of raw (pre-activation) density and color parameters.
#[derive(Debug, Clone)]
pub struct VoxelField {
    /// Voxel counts per axis; the corner lattice has one more point per axis.
    pub resolution: [usize; 3],
    pub bbox: Aabb,
    /// Raw density, one per corner.
    density: Vec<f64>,
    /// Raw color, three per corner, channel-interleaved.
    color: Vec<f64>,
    /// Bumped on every parameter mutation; tapes record it so a backward
    /// pass can detect replay against changed parameters.
    version: u64,
}

pub const DENSITY_INIT: f64 = -1.0;
pub const COLOR_INIT: f64 = 0.0;

impl VoxelField {
    pub fn new(resolution: [usize; 3], bbox: Aabb) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::domain("voxel resolution must be positive"));
        }
        let corners = (resolution[0] + 1) * (resolution[1] + 1) * (resolution[2] + 1);
        Ok(VoxelField {
            resolution,
            bbox,
            density: vec![DENSITY_INIT; corners],
            color: vec![COLOR_INIT; corners * 3],
            version: 0,
        })
    }

    pub fn corner_count(&self) -> usize {
        self.density.len()
    }

    /// Total trainable parameter count (density + color).
    pub fn param_count(&self) -> usize {
        self.density.len() + self.color.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn density_raw(&self) -> &[f64] {
        &self.density
    }

    pub fn color_raw(&self) -> &[f64] {
        &self.color
    }

    /// Mutable parameter access; bumps the version stamp.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.version += 1;
        (&mut self.density, &mut self.color)
    }

    /// Construct from raw parameter arrays (checkpoint loading, baking).
    pub fn from_raw(
        resolution: [usize; 3],
        bbox: Aabb,
        density: Vec<f64>,
        color: Vec<f64>,
    ) -> Result<Self> {
        let corners = (resolution[0] + 1) * (resolution[1] + 1) * (resolution[2] + 1);
        if density.len() != corners || color.len() != corners * 3 {
            return Err(Error::domain(format!(
                "parameter arrays do not match resolution {resolution:?}: density {}, color {}",
                density.len(),
                color.len()
            )));
        }
        Ok(VoxelField {
            resolution,
            bbox,
            density,
            color,
            version: 0,
        })
    }

    /// Flat index of a corner lattice point (x fastest).
    pub fn corner_index(&self, x: usize, y: usize, z: usize) -> usize {
        let (nx, ny) = (self.resolution[0] + 1, self.resolution[1] + 1);
        (z * ny + y) * nx + x
    }

    /// World position of a corner lattice point.
    pub fn corner_position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let e = self.bbox.extent();
        Vec3::new(
            self.bbox.min.x + e.x * x as f64 / self.resolution[0] as f64,
            self.bbox.min.y + e.y * y as f64 / self.resolution[1] as f64,
            self.bbox.min.z + e.z * z as f64 / self.resolution[2] as f64,
        )
    }

    fn cell_weights(&self, p: &Vec3) -> CellWeights {
        let e = self.bbox.extent();
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut scale = [0f64; 3];
        for axis in 0..3 {
            let n = self.resolution[axis];
            let u = (p[axis] - self.bbox.min[axis]) / e[axis] * n as f64;
            let c = (u.floor() as isize).clamp(0, n as isize - 1) as usize;
            cell[axis] = c;
            frac[axis] = u - c as f64;
            scale[axis] = n as f64 / e[axis];
        }
        let mut corners = [(0usize, 0f64); 8];
        for (k, corner) in corners.iter_mut().enumerate() {
            let (ox, oy, oz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let wx = if ox == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if oy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if oz == 1 { frac[2] } else { 1.0 - frac[2] };
            let idx = self.corner_index(cell[0] + ox, cell[1] + oy, cell[2] + oz);
            *corner = (idx, wx * wy * wz);
        }
        CellWeights {
            corners,
            frac,
            scale,
        }
    }

    /// Activated density and color at a world point. Zero density and black
    /// color outside the bounding box.
    pub fn query(&self, p: &Vec3) -> Result<FieldSample> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::numeric(format!("non-finite query position {p:?}")));
        }
        if !self.bbox.contains(p) {
            return Ok(FieldSample {
                sigma: 0.0,
                color: Rgb::zeros(),
            });
        }
        let cw = self.cell_weights(p);
        let mut pre_d = 0.0;
        let mut pre_c = [0.0f64; 3];
        for &(idx, w) in &cw.corners {
            pre_d += w * self.density[idx];
            let base = idx * 3;
            pre_c[0] += w * self.color[base];
            pre_c[1] += w * self.color[base + 1];
            pre_c[2] += w * self.color[base + 2];
        }
        Ok(FieldSample {
            sigma: softplus(pre_d),
            color: Rgb::new(sigmoid(pre_c[0]), sigmoid(pre_c[1]), sigmoid(pre_c[2])),
        })
    }

    /// Backward of [`VoxelField::query`]: accumulates parameter gradients
    /// into `grads` and returns the spatial gradient
    /// `d_sigma * dsigma/dx + sum_ch d_color[ch] * dc[ch]/dx`.
    ///
    /// The spatial gradient is built from corner-pair differences, so a cell
    /// with equal corner values yields an exact zero.
    pub fn query_grad(
        &self,
        p: &Vec3,
        d_sigma: f64,
        d_color: &Rgb,
        grads: &mut FieldGrads,
    ) -> Vec3 {
        if !self.bbox.contains(p) {
            return Vec3::zeros();
        }
        let cw = self.cell_weights(p);
        // Gather the cell's raw parameters: corner k = (ox, oy, oz) bits.
        let mut d = [0.0f64; 8];
        let mut c = [[0.0f64; 3]; 8];
        let mut pre_d = 0.0;
        let mut pre_c = [0.0f64; 3];
        for (k, &(idx, w)) in cw.corners.iter().enumerate() {
            d[k] = self.density[idx];
            let base = idx * 3;
            c[k] = [self.color[base], self.color[base + 1], self.color[base + 2]];
            pre_d += w * d[k];
            pre_c[0] += w * c[k][0];
            pre_c[1] += w * c[k][1];
            pre_c[2] += w * c[k][2];
        }
        // Activation derivatives at the interpolated pre-activations.
        let dsig = softplus_prime(pre_d);
        let s = [sigmoid(pre_c[0]), sigmoid(pre_c[1]), sigmoid(pre_c[2])];
        let dcol = [s[0] * (1.0 - s[0]), s[1] * (1.0 - s[1]), s[2] * (1.0 - s[2])];

        let gd = d_sigma * dsig;
        let gc = [
            d_color.x * dcol[0],
            d_color.y * dcol[1],
            d_color.z * dcol[2],
        ];
        for &(idx, w) in &cw.corners {
            grads.density[idx] += gd * w;
            let base = idx * 3;
            grads.color[base] += gc[0] * w;
            grads.color[base + 1] += gc[1] * w;
            grads.color[base + 2] += gc[2] * w;
        }

        // d pre / d axis = scale * sum over the 4 corner pairs that differ
        // only in that axis of (face weight) * (high - low).
        let mut out = Vec3::zeros();
        for axis in 0..3 {
            let hi_bit = 1usize << axis;
            let mut dd = 0.0;
            let mut dc = [0.0f64; 3];
            for k in 0..8usize {
                if k & hi_bit != 0 {
                    continue;
                }
                let lo = k;
                let hi = k | hi_bit;
                // Weight of this pair's face: product of the other two axes'
                // corner weights; recover it from the full weight of the
                // corner whose `axis` factor we divide out analytically.
                let mut face_w = 1.0;
                for other in 0..3 {
                    if other == axis {
                        continue;
                    }
                    let bit = 1usize << other;
                    let f = cw.frac[other];
                    face_w *= if k & bit != 0 { f } else { 1.0 - f };
                }
                dd += face_w * (d[hi] - d[lo]);
                for ch in 0..3 {
                    dc[ch] += face_w * (c[hi][ch] - c[lo][ch]);
                }
            }
            let scale = cw.scale[axis];
            out[axis] =
                scale * (gd * dd + gc[0] * dc[0] + gc[1] * dc[1] + gc[2] * dc[2]);
        }
        out
    }

    /// Trilinear weights of the containing cell; test hook for the
    /// partition-of-unity property.
    #[cfg(test)]
    pub(crate) fn corner_weights(&self, p: &Vec3) -> Vec<f64> {
        self.cell_weights(p).corners.iter().map(|c| c.1).collect()
    }
}

/// Gradient accumulator shaped exactly like the field parameters.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros_like(field: &VoxelField) -> Self {
        FieldGrads {
            density: vec![0.0; field.density.len()],
            color: vec![0.0; field.color.len()],
        }
    }

    pub fn clear(&mut self) {
        self.density.iter_mut().for_each(|g| *g = 0.0);
        self.color.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn merge(&mut self, other: &FieldGrads) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b;
        }
    }

    /// Flattened view: density params first, then interleaved color params.
    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.density.len() {
            self.density[i]
        } else {
            self.color[i - self.density.len()]
        }
    }
}

/// Read a parameter through the flattened (density-then-color) indexing.
pub fn param_get_flat(field: &VoxelField, i: usize) -> f64 {
    if i < field.density.len() {
        field.density[i]
    } else {
        field.color[i - field.density.len()]
    }
}

/// Add `delta` to a parameter through the flattened indexing.
pub fn param_add_flat(field: &mut VoxelField, i: usize, delta: f64) {
    let nd = field.density.len();
    let (density, color) = field.params_mut();
    if i < nd {
        density[i] += delta;
    } else {
        color[i - nd] += delta;
    }
}

/// One occupancy bit per voxel cell: a cell is flagged empty only when the
/// maximum activated density over its corners is at or below the threshold,
/// which bounds the interpolated density anywhere inside the cell.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub resolution: [usize; 3],
    pub bbox: Aabb,
    pub threshold: f64,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn occupied_flags(&self) -> &[bool] {
        &self.occupied
    }

    /// True when the cell containing `p` may hold density above the
    /// threshold. Points outside the box are never occupied.
    pub fn is_occupied(&self, p: &Vec3) -> bool {
        if !self.bbox.contains(p) {
            return false;
        }
        let e = self.bbox.extent();
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let n = self.resolution[axis];
            let u = (p[axis] - self.bbox.min[axis]) / e[axis] * n as f64;
            idx[axis] = (u.floor() as isize).clamp(0, n as isize - 1) as usize;
        }
        self.occupied[(idx[2] * self.resolution[1] + idx[1]) * self.resolution[0] + idx[0]]
    }
}

/// Builds a conservative occupancy grid at the field's own resolution.
pub fn rebuild_occupancy(field: &VoxelField, threshold: f64) -> Result<OccupancyGrid> {
    if !(threshold >= 0.0) {
        return Err(Error::domain("occupancy threshold must be >= 0"));
    }
    let [nx, ny, nz] = field.resolution;
    let mut occupied = vec![false; nx * ny * nz];
    let density = field.density_raw();
    for cz in 0..nz {
        for cy in 0..ny {
            for cx in 0..nx {
                let mut max_raw = f64::NEG_INFINITY;
                for k in 0..8usize {
                    let idx =
                        field.corner_index(cx + (k & 1), cy + ((k >> 1) & 1), cz + ((k >> 2) & 1));
                    max_raw = max_raw.max(density[idx]);
                }
                occupied[(cz * ny + cy) * nx + cx] = softplus(max_raw) > threshold;
            }
        }
    }
    Ok(OccupancyGrid {
        resolution: field.resolution,
        bbox: field.bbox,
        threshold,
        occupied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_field(res: usize) -> VoxelField {
        let bbox = Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        VoxelField::new([res, res, res], bbox).unwrap()
    }

    fn randomized_field(res: usize, seed: u64) -> VoxelField {
        let mut f = unit_field(res);
        let (density, color) = f.params_mut();
        for (i, d) in density.iter_mut().enumerate() {
            *d = 2.0 * crate::optics::hash_to_unit(seed ^ (i as u64)) - 0.5;
        }
        for (i, c) in color.iter_mut().enumerate() {
            *c = 3.0 * crate::optics::hash_to_unit(seed ^ 0xc01a ^ (i as u64)) - 1.5;
        }
        f
    }

    #[test]
    fn zero_params_give_softplus_zero() {
        let mut f = unit_field(4);
        {
            let (density, _) = f.params_mut();
            density.iter_mut().for_each(|d| *d = 0.0);
        }
        let s = f.query(&Vec3::new(0.3, 0.7, 0.5)).unwrap();
        assert_relative_eq!(s.sigma, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn outside_bbox_is_empty() {
        let f = randomized_field(4, 1);
        let s = f.query(&Vec3::new(1.5, 0.5, 0.5)).unwrap();
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.color, Rgb::zeros());
    }

    #[test]
    fn corner_query_is_exact() {
        let mut f = unit_field(4);
        let idx = f.corner_index(2, 1, 3);
        {
            let (density, color) = f.params_mut();
            density[idx] = 1.7;
            color[idx * 3] = -0.4;
        }
        let p = f.corner_position(2, 1, 3);
        let s = f.query(&p).unwrap();
        assert_eq!(s.sigma, softplus(1.7));
        assert_eq!(s.color.x, sigmoid(-0.4));
    }

    #[test]
    fn non_finite_query_rejected() {
        let f = unit_field(2);
        assert!(f.query(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn weights_partition_unity(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let f = unit_field(5);
            let w = f.corner_weights(&Vec3::new(x, y, z));
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&wi| wi >= -1e-15));
        }
    }

    #[test]
    fn zero_adjoint_zero_grads() {
        let f = randomized_field(3, 2);
        let mut g = FieldGrads::zeros_like(&f);
        let dx = f.query_grad(&Vec3::new(0.4, 0.4, 0.4), 0.0, &Rgb::zeros(), &mut g);
        assert_eq!(dx, Vec3::zeros());
        assert!(g.density.iter().all(|&v| v == 0.0));
        assert!(g.color.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_field_flat_spatial_gradient() {
        let mut f = unit_field(4);
        {
            let (density, color) = f.params_mut();
            density.iter_mut().for_each(|d| *d = 0.9);
            color.iter_mut().for_each(|c| *c = -0.3);
        }
        let mut g = FieldGrads::zeros_like(&f);
        let dx = f.query_grad(
            &Vec3::new(0.37, 0.61, 0.83),
            1.0,
            &Rgb::new(1.0, 1.0, 1.0),
            &mut g,
        );
        assert!(dx.norm() < 1e-12);
    }

    /// Central finite differences of `query` against `query_grad`, both for
    /// parameter gradients and the spatial gradient.
    #[test]
    fn query_grad_matches_finite_differences() {
        let f = randomized_field(4, 3);
        let probes = [
            Vec3::new(0.21, 0.43, 0.69),
            Vec3::new(0.05, 0.93, 0.51),
            Vec3::new(0.76, 0.12, 0.33),
        ];
        // Adjoint contraction: a fixed linear functional of (sigma, color).
        let d_sigma = 0.8;
        let d_color = Rgb::new(0.3, -0.5, 1.1);
        let value = |f: &VoxelField, p: &Vec3| {
            let s = f.query(p).unwrap();
            d_sigma * s.sigma + d_color.dot(&s.color)
        };
        for p in probes {
            let mut g = FieldGrads::zeros_like(&f);
            let dx = f.query_grad(&p, d_sigma, &d_color, &mut g);

            // Parameter gradients on every touched corner.
            let mut fd_field = f.clone();
            let h = 1e-5;
            for i in 0..f.param_count() {
                let analytic = g.get_flat(i);
                if analytic == 0.0 {
                    continue;
                }
                param_add_flat(&mut fd_field, i, h);
                let up = value(&fd_field, &p);
                param_add_flat(&mut fd_field, i, -2.0 * h);
                let dn = value(&fd_field, &p);
                param_add_flat(&mut fd_field, i, h);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (analytic - fd).abs() <= 1e-5 * fd.abs().max(1e-3),
                    "param {i}: analytic {analytic} vs fd {fd}"
                );
            }

            // Spatial gradient, step 1e-4 of a voxel (voxel = 0.25).
            let h = 0.25e-4;
            for axis in 0..3 {
                let mut dp = Vec3::zeros();
                dp[axis] = h;
                let fd = (value(&f, &(p + dp)) - value(&f, &(p - dp))) / (2.0 * h);
                assert!(
                    (dx[axis] - fd).abs() <= 1e-4 * fd.abs().max(1e-2),
                    "axis {axis}: analytic {} vs fd {fd}",
                    dx[axis]
                );
            }
        }
    }

    #[test]
    fn occupancy_vacuous_threshold() {
        let f = randomized_field(4, 4);
        let occ = rebuild_occupancy(&f, f64::INFINITY).unwrap();
        assert!(occ.occupied_flags().iter().all(|&o| !o));
    }

    #[test]
    fn occupancy_zero_threshold_everything_occupied() {
        // Softplus is strictly positive, so nothing can be flagged empty.
        let f = randomized_field(4, 5);
        let occ = rebuild_occupancy(&f, 0.0).unwrap();
        assert!(occ.occupied_flags().iter().all(|&o| o));
    }

    proptest! {
        /// Conservativeness: interpolated density above the threshold implies
        /// the containing cell is flagged occupied.
        #[test]
        fn occupancy_is_conservative(seed in 0u64..50, x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let f = randomized_field(3, seed);
            let occ = rebuild_occupancy(&f, 0.8).unwrap();
            let p = Vec3::new(x, y, z);
            let s = f.query(&p).unwrap();
            if s.sigma > 0.8 {
                prop_assert!(occ.is_occupied(&p));
            }
        }
    }

    #[test]
    fn version_bumps_on_mutation() {
        let mut f = unit_field(2);
        let v0 = f.version();
        let _ = f.params_mut();
        assert!(f.version() > v0);
    }

    #[test]
    fn bbox_ray_range() {
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let (t0, t1) = bbox
            .ray_range(&Vec3::new(0.0, 0.0, -3.0), &Vec3::new(0.0, 0.0, 1.0))
            .unwrap();
        assert_relative_eq!(t0, 2.0);
        assert_relative_eq!(t1, 4.0);
        assert!(bbox
            .ray_range(&Vec3::new(0.0, 5.0, -3.0), &Vec3::new(0.0, 0.0, 1.0))
            .is_none());
    }

    #[test]
    fn activation_inverses_roundtrip() {
        for y in [1e-6, 0.01, 0.6931, 3.0, 50.0] {
            assert_relative_eq!(softplus(softplus_inv(y)), y, max_relative = 1e-10);
        }
        for p in [1e-6, 0.25, 0.5, 0.75, 1.0 - 1e-6] {
            assert_relative_eq!(sigmoid(sigmoid_inv(p)), p, max_relative = 1e-9);
        }
    }
}
