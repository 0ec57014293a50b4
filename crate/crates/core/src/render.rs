//! CPU ray casting of a classified volume. Directional occlusion shading
//! averages transmittance over a cone of secondary rays toward a head
//! light; Phong shading of the first attribute's gradient is kept as a
//! baseline.

use image::{Rgba as Pixel, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::ColorOpacityVolume;
use crate::error::{Error, Result};
use crate::volume::Grid;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}
fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / norm(a))
}

/// Pinhole camera in voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: V3,
    pub look_at: V3,
    pub up: V3,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
}

/// Orthonormal camera frame: forward, right, true up.
#[derive(Clone, Copy, Debug)]
pub struct CameraBasis {
    pub forward: V3,
    pub right: V3,
    pub up: V3,
    tan_half: f64,
}

impl Camera {
    /// Looks at the grid center from a fixed oblique direction, far enough
    /// that the bounding sphere fits the field of view.
    pub fn default_for(grid: Grid, width: u32, height: u32) -> Self {
        let c = grid.dims.map(|d| (d as f64 - 1.0) / 2.0);
        let radius = norm(grid.dims.map(|d| d as f64 / 2.0));
        let fov_deg: f64 = 30.0;
        let dist = radius / (fov_deg.to_radians() / 2.0).sin() * 1.05;
        let dir = normalize([0.55, -0.75, 0.45]);
        Camera {
            eye: add(c, scale(dir, dist)),
            look_at: c,
            up: [0.0, 0.0, 1.0],
            fov_deg,
            width,
            height,
        }
    }

    pub fn basis(&self) -> Result<CameraBasis> {
        let bad = |m: &str| Err(Error::DegenerateCamera(m.into()));
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("field of view must lie in (0, 180) degrees");
        }
        if self.width == 0 || self.height == 0 {
            return bad("viewport must be non-empty");
        }
        if self.eye.iter().chain(&self.look_at).chain(&self.up).any(|x| !x.is_finite()) {
            return bad("camera vectors must be finite");
        }
        let f = sub(self.look_at, self.eye);
        if norm(f) < 1e-12 {
            return bad("eye coincides with look-at point");
        }
        let forward = normalize(f);
        let r = cross(forward, self.up);
        if norm(r) < 1e-9 * norm(self.up).max(1e-300) || norm(self.up) < 1e-12 {
            return bad("up vector is parallel to the view direction");
        }
        let right = normalize(r);
        Ok(CameraBasis {
            forward,
            right,
            up: cross(right, forward),
            tan_half: (self.fov_deg.to_radians() / 2.0).tan(),
        })
    }

    /// Unit ray direction through the center of pixel `(i, j)`, row 0 at
    /// the top.
    pub fn ray_dir(&self, b: &CameraBasis, i: u32, j: u32) -> V3 {
        let aspect = self.width as f64 / self.height as f64;
        let x = (2.0 * (i as f64 + 0.5) / self.width as f64 - 1.0) * b.tan_half * aspect;
        let y = (1.0 - 2.0 * (j as f64 + 0.5) / self.height as f64) * b.tan_half;
        normalize(add(b.forward, add(scale(b.right, x), scale(b.up, y))))
    }

    /// Pixel coordinates (continuous, origin top-left) of a world point in
    /// front of the camera.
    pub fn project(&self, b: &CameraBasis, p: V3) -> Option<[f64; 2]> {
        let q = sub(p, self.eye);
        let z = dot(q, b.forward);
        if z <= 0.0 {
            return None;
        }
        let aspect = self.width as f64 / self.height as f64;
        let x = dot(q, b.right) / z / (b.tan_half * aspect);
        let y = dot(q, b.up) / z / b.tan_half;
        Some([(x + 1.0) / 2.0 * self.width as f64, (1.0 - y) / 2.0 * self.height as f64])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shading {
    DirectionalOcclusion,
    Phong,
    /// Reserved; rejected by validation.
    ExtinctionOptimized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    /// Full opening angle in degrees.
    pub aperture_deg: f64,
    pub samples: usize,
    /// Secondary ray length in voxels.
    pub max_distance: f64,
    pub seed: u64,
}

impl Default for ConeParams {
    fn default() -> Self {
        ConeParams {
            aperture_deg: 60.0,
            samples: 16,
            max_distance: 32.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Samples per voxel along the ray.
    pub sampling_rate: f64,
    pub shading: Shading,
    pub cone: ConeParams,
    pub ambient: f64,
    pub background: [f64; 3],
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            sampling_rate: 1.0,
            shading: Shading::DirectionalOcclusion,
            cone: ConeParams::default(),
            ambient: 0.15,
            background: [0.0; 3],
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return bad(format!("sampling rate must be positive, got {}", self.sampling_rate));
        }
        if !(self.cone.aperture_deg > 0.0 && self.cone.aperture_deg < 90.0) {
            return bad(format!("cone aperture must lie in (0, 90) degrees, got {}", self.cone.aperture_deg));
        }
        if self.cone.samples == 0 || !(self.cone.max_distance > 0.0) {
            return bad("cone needs at least one sample and a positive reach".into());
        }
        if !(0.0..=1.0).contains(&self.ambient) || self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("ambient and background must lie in [0, 1]".into());
        }
        if self.shading == Shading::ExtinctionOptimized {
            return bad("extinction-optimized shading is not implemented".into());
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        1.0 / self.sampling_rate
    }
}

/// Early ray termination threshold on accumulated opacity.
pub const TERMINATION_ALPHA: f64 = 0.99;

/// Axis-aligned bounds of the voxel cells, `[-0.5, dims - 0.5]`.
pub fn volume_bounds(grid: Grid) -> (V3, V3) {
    ([-0.5; 3], grid.dims.map(|d| d as f64 - 0.5))
}

/// Parametric entry and exit of a ray through a box (slab method), with
/// the entry clamped to 0.
pub fn ray_box(origin: V3, dir: V3, lo: V3, hi: V3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t1 > t0).then_some((t0, t1))
}

fn trilinear(grid: Grid, values: &[f32], p: V3) -> f64 {
    let (idx, w) = grid.trilinear_stencil(p);
    (0..8).map(|c| values[idx[c]] as f64 * w[c]).sum()
}

/// Splits `[t0, t1]` into equal segments no longer than `step`; returns the
/// segment count and length so the covered length is exact.
fn segments(t0: f64, t1: f64, step: f64) -> (usize, f64) {
    let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
    (n, (t1 - t0) / n as f64)
}

/// exp(−∫σ) from `origin` along `dir` for at most `reach`, clipped to the
/// volume, by midpoint ray marching with steps no longer than `step`.
pub fn transmittance(covol: &ColorOpacityVolume, origin: V3, dir: V3, reach: f64, step: f64) -> f64 {
    let (lo, hi) = volume_bounds(covol.grid);
    let Some((t0, t1)) = ray_box(origin, dir, lo, hi) else {
        return 1.0;
    };
    let t1 = t1.min(reach);
    if t1 <= t0 {
        return 1.0;
    }
    let (n, dt) = segments(t0, t1, step);
    let mut tau = 0.0;
    for k in 0..n {
        let p = add(origin, scale(dir, t0 + (k as f64 + 0.5) * dt));
        tau += trilinear(covol.grid, &covol.extinction, p) * dt;
        if tau > 40.0 {
            break;
        }
    }
    (-tau).exp()
}

/// Fixed cone directions around +z: a golden-angle spiral over the
/// spherical cap, rotated by a seed-derived offset.
pub fn cone_directions(cone: &ConeParams) -> Vec<V3> {
    let half = (cone.aperture_deg / 2.0).to_radians();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let offset = (crate::fit::splitmix64(cone.seed) >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
    (0..cone.samples)
        .map(|i| {
            let cos_t = 1.0 - (i as f64 + 0.5) / cone.samples as f64 * (1.0 - half.cos());
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi = offset + i as f64 * golden;
            [sin_t * phi.cos(), sin_t * phi.sin(), cos_t]
        })
        .collect()
}

fn frame_around(w: V3) -> (V3, V3) {
    let a = if w[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(a, w));
    (u, cross(w, u))
}

/// Cone directions rotated to surround `to_light`.
pub fn oriented_cone(to_light: V3, cone: &ConeParams) -> Vec<V3> {
    let w = normalize(to_light);
    let (u, v) = frame_around(w);
    cone_directions(cone)
        .into_iter()
        .map(|d| add(add(scale(u, d[0]), scale(v, d[1])), scale(w, d[2])))
        .collect()
}

/// Mean transmittance over the cone of secondary rays toward the light,
/// clamped to `[ambient, 1]`.
pub fn occlusion_factor(covol: &ColorOpacityVolume, pos: V3, dirs: &[V3], reach: f64, step: f64, ambient: f64) -> f64 {
    let mean = dirs.iter().map(|&d| transmittance(covol, pos, d, reach, step)).sum::<f64>() / dirs.len() as f64;
    mean.clamp(ambient, 1.0)
}

fn central_gradient(grid: Grid, field: &[f32], p: V3) -> V3 {
    let mut g = [0.0; 3];
    for a in 0..3 {
        let (mut lo, mut hi) = (p, p);
        lo[a] -= 0.5;
        hi[a] += 0.5;
        g[a] = trilinear(grid, field, hi) - trilinear(grid, field, lo);
    }
    g
}

fn phong(grid: Grid, field: &[f32], p: V3, view: V3, ambient: f64) -> f64 {
    let g = central_gradient(grid, field, p);
    let gn = norm(g);
    if gn < 1e-12 {
        return ambient;
    }
    // head light: light and view directions coincide
    let n = scale(g, 1.0 / gn);
    let ndl = dot(n, view).abs();
    ambient + (1.0 - ambient) * (0.8 * ndl + 0.2 * ndl.powf(32.0))
}

/// Render the classified volume to a linear RGB buffer, row 0 at the top.
/// `phong_field` is the scalar field whose gradient drives Phong shading.
pub fn raycast_linear(covol: &ColorOpacityVolume, cam: &Camera, params: &RenderParams, phong_field: Option<&[f32]>) -> Result<Vec<[f64; 3]>> {
    params.validate()?;
    let basis = cam.basis()?;
    if params.shading == Shading::Phong && phong_field.map(|f| f.len()) != Some(covol.grid.len()) {
        return Err(Error::InvalidParam("Phong shading needs a scalar field on the volume grid".into()));
    }
    let dirs = oriented_cone(scale(basis.forward, -1.0), &params.cone);
    let step = params.step();
    let (lo, hi) = volume_bounds(covol.grid);
    let grid = covol.grid;
    let (w, h) = (cam.width, cam.height);
    let pixels = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|k| {
            let (i, j) = ((k % w as usize) as u32, (k / w as usize) as u32);
            let dir = cam.ray_dir(&basis, i, j);
            let mut color = [0.0; 3];
            let mut trans = 1.0;
            if let Some((t0, t1)) = ray_box(cam.eye, dir, lo, hi) {
                let (n, dt) = segments(t0, t1, step);
                for s in 0..n {
                    let p = add(cam.eye, scale(dir, t0 + (s as f64 + 0.5) * dt));
                    let sigma = trilinear(grid, &covol.extinction, p);
                    if sigma <= 0.0 {
                        continue;
                    }
                    let a = 1.0 - (-sigma * dt).exp();
                    let (idx, wt) = grid.trilinear_stencil(p);
                    let mut pre = [0.0; 4];
                    for c in 0..8 {
                        let v = covol.rgba[idx[c]];
                        for ch in 0..4 {
                            pre[ch] += v[ch] as f64 * wt[c];
                        }
                    }
                    if pre[3] <= 0.0 {
                        continue;
                    }
                    let shade = match params.shading {
                        Shading::Phong => phong(grid, phong_field.unwrap(), p, scale(dir, -1.0), params.ambient),
                        _ => occlusion_factor(covol, p, &dirs, params.cone.max_distance, step, params.ambient),
                    };
                    for ch in 0..3 {
                        color[ch] += trans * a * (pre[ch] / pre[3]) * shade;
                    }
                    trans *= 1.0 - a;
                    if 1.0 - trans >= TERMINATION_ALPHA {
                        break;
                    }
                }
            }
            [0, 1, 2].map(|ch| color[ch] + trans * params.background[ch])
        })
        .collect();
    Ok(pixels)
}

pub fn to_image(width: u32, height: u32, linear: &[[f64; 3]]) -> RgbaImage {
    RgbaImage::from_fn(width, height, |i, j| {
        let c = linear[(j * width + i) as usize];
        let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        Pixel([q(c[0]), q(c[1]), q(c[2]), 255])
    })
}

pub fn raycast(covol: &ColorOpacityVolume, cam: &Camera, params: &RenderParams, phong_field: Option<&[f32]>) -> Result<RgbaImage> {
    let lin = raycast_linear(covol, cam, params, phong_field)?;
    Ok(to_image(cam.width, cam.height, &lin))
}

/// Mean absolute per-channel difference of two same-sized images, in 0..255.
pub fn mean_channel_error(a: &RgbaImage, b: &RgbaImage) -> Option<f64> {
    if a.dimensions() != b.dimensions() {
        return None;
    }
    let s: u64 = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y) as u64).sum();
    Some(s as f64 / a.as_raw().len() as f64)
}
