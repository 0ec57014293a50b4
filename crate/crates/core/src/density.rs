//! Density images of indexed points: bilinear forward splatting into HDR
//! buffers, dynamic-bandwidth Epanechnikov KDE, and tone mapping.

use std::f64::consts::PI;

use image::{Rgba, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::indexed::{AxisLayout, IndexedPointVolume, V_MAX, V_MIN};
use crate::kdtree::KdTree;

pub const DEFAULT_WIDTH: usize = 900;
pub const DEFAULT_HEIGHT: usize = 300;
const SPLAT_CHUNK: usize = 1 << 16;
const MAGIC: &[u8; 4] = b"CIPD";

/// Maps a subspace's band `[u0, u0 + 3d) × [V_MIN, V_MAX]` to pixels; high
/// `v` is at the top.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub width: usize,
    pub height: usize,
    pub u0: f64,
    pub u_span: f64,
}

impl Viewport {
    pub fn for_subspace(layout: &AxisLayout, subspace: usize, width: usize, height: usize) -> Self {
        let (lo, hi) = layout.band(subspace);
        Viewport {
            width,
            height,
            u0: lo,
            u_span: hi - lo,
        }
    }

    /// Continuous pixel coordinates; pixel (i, j) covers [i, i+1) × [j, j+1).
    pub fn to_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        (
            (u - self.u0) / self.u_span * self.width as f64,
            (V_MAX - v) / (V_MAX - V_MIN) * self.height as f64,
        )
    }

    pub fn to_uv(&self, x: f64, y: f64) -> (f64, f64) {
        (self.u0 + x / self.width as f64 * self.u_span, V_MAX - y / self.height as f64 * (V_MAX - V_MIN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityBuffer {
    pub width: usize,
    pub height: usize,
    pub subspace: usize,
    pub values: Vec<f64>,
    pub total_mass: f64,
}

impl DensityBuffer {
    pub fn zeros(width: usize, height: usize, subspace: usize) -> Self {
        DensityBuffer {
            width,
            height,
            subspace,
            values: vec![0.0; width * height],
            total_mass: 0.0,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Header (magic, width, height, subspace, total mass) followed by
    /// little-endian float32 values, row-major from the top row.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.subspace] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.total_mass.to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidParam(format!("density buffer: {msg}"));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("bad header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (width, height, subspace) = (word(4), word(8), word(12));
        let total_mass = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let body = &bytes[24..];
        if body.len() != width * height * 4 {
            return Err(bad("size mismatch"));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Ok(DensityBuffer {
            width,
            height,
            subspace,
            values,
            total_mass,
        })
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn splat_into(values: &mut [f64], width: usize, height: usize, x: f64, y: f64) {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - ix, fy - iy);
    let clampi = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    let xs = [clampi(ix, width), clampi(ix + 1.0, width)];
    let ys = [clampi(iy, height), clampi(iy + 1.0, height)];
    let wx = [1.0 - tx, tx];
    let wy = [1.0 - ty, ty];
    for a in 0..2 {
        for b in 0..2 {
            values[ys[b] * width + xs[a]] += wx[a] * wy[b];
        }
    }
}

/// Splat unit masses at pixel coordinates. Positions outside the image
/// deposit on the nearest edge pixels, so mass is always conserved.
/// Partial buffers over fixed chunks are summed in order, so the result
/// does not depend on the thread count.
pub fn splat_pixels(points: &[(f64, f64)], width: usize, height: usize, subspace: usize) -> DensityBuffer {
    let partials: Vec<Vec<f64>> = points
        .par_chunks(SPLAT_CHUNK)
        .map(|chunk| {
            let mut vals = vec![0.0; width * height];
            for &(x, y) in chunk {
                splat_into(&mut vals, width, height, x, y);
            }
            vals
        })
        .collect();
    let mut buf = DensityBuffer::zeros(width, height, subspace);
    for p in partials {
        buf.values.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    buf.total_mass = points.len() as f64;
    buf
}

/// Splat every valid indexed point of one subspace.
pub fn splat_subspace(ipv: &IndexedPointVolume, subspace: usize, width: usize, height: usize) -> DensityBuffer {
    let vp = Viewport::for_subspace(&ipv.layout, subspace, width, height);
    let pts: Vec<(f64, f64)> = ipv.points(subspace).map(|(_, p)| vp.to_pixel(p.u, p.v)).collect();
    splat_pixels(&pts, width, height, subspace)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeParams {
    /// Maximum kernel radius in pixels.
    pub r_max: u32,
    /// Accumulated mass at which the radius stops growing.
    pub mass_cap: f64,
}

impl Default for KdeParams {
    fn default() -> Self {
        KdeParams { r_max: 8, mass_cap: 20.0 }
    }
}

impl KdeParams {
    pub fn validate(&self) -> Result<()> {
        if self.r_max < 1 {
            return Err(Error::InvalidParam("r_max must be >= 1".into()));
        }
        if !(self.mass_cap > 0.0) {
            return Err(Error::InvalidParam("mass_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized 2D Epanechnikov kernel on the unit disk.
pub fn epanechnikov(t: f64) -> f64 {
    if t < 1.0 {
        2.0 / PI * (1.0 - t * t)
    } else {
        0.0
    }
}

/// 2D tree over occupied pixel centers with their masses.
pub struct PixelTree {
    pub tree: KdTree,
    pub mass: Vec<f64>,
}

pub fn build_kdtree2(buf: &DensityBuffer) -> PixelTree {
    let mut pts = Vec::new();
    let mut mass = Vec::new();
    for (i, &v) in buf.values.iter().enumerate() {
        if v > 0.0 {
            pts.push([(i % buf.width) as f64 + 0.5, (i / buf.width) as f64 + 0.5]);
            mass.push(v);
        }
    }
    PixelTree {
        tree: KdTree::build(2, &pts),
        mass,
    }
}

fn neighbors(pt: &PixelTree, c: [f64; 2], r: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    pt.tree.for_each_within_radius(&c, r, |i, d2| out.push((d2, pt.mass[i])));
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn choose_radius(sorted: &[(f64, f64)], p: &KdeParams) -> u32 {
    let mut acc = 0.0;
    let mut k = 0;
    for r in 1..=p.r_max {
        let r2 = (r * r) as f64;
        while k < sorted.len() && sorted[k].0 <= r2 {
            acc += sorted[k].1;
            k += 1;
        }
        if acc >= p.mass_cap {
            return r;
        }
    }
    p.r_max
}

fn kernel_sum(sorted: &[(f64, f64)], r: u32) -> f64 {
    let r = r as f64;
    sorted.iter().map(|&(d2, m)| m * epanechnikov(d2.sqrt() / r)).sum::<f64>() / (r * r)
}

/// Per-pixel bandwidth: the smallest integer radius whose disk holds at
/// least `mass_cap`, else `r_max`.
pub fn kde_radii(buf: &DensityBuffer, params: &KdeParams) -> Vec<u32> {
    let pt = build_kdtree2(buf);
    (0..buf.values.len())
        .into_par_iter()
        .map(|i| {
            let c = [(i % buf.width) as f64 + 0.5, (i / buf.width) as f64 + 0.5];
            choose_radius(&neighbors(&pt, c, params.r_max as f64), params)
        })
        .collect()
}

fn kde_with(buf: &DensityBuffer, r_max: u32, radius: impl Fn(&[(f64, f64)]) -> u32 + Sync) -> DensityBuffer {
    let pt = build_kdtree2(buf);
    let mut values: Vec<f64> = (0..buf.values.len())
        .into_par_iter()
        .map(|i| {
            let c = [(i % buf.width) as f64 + 0.5, (i / buf.width) as f64 + 0.5];
            let nb = neighbors(&pt, c, r_max as f64);
            if nb.is_empty() {
                return 0.0;
            }
            kernel_sum(&nb, radius(&nb))
        })
        .collect();
    let before = buf.sum();
    let after: f64 = values.iter().sum();
    if after > 0.0 {
        let k = before / after;
        values.iter_mut().for_each(|v| *v *= k);
    }
    DensityBuffer {
        width: buf.width,
        height: buf.height,
        subspace: buf.subspace,
        values,
        total_mass: buf.total_mass,
    }
}

/// Dynamic-bandwidth KDE, renormalized to the input mass.
pub fn kde_dynamic(buf: &DensityBuffer, params: &KdeParams) -> Result<DensityBuffer> {
    params.validate()?;
    Ok(kde_with(buf, params.r_max, |nb| choose_radius(nb, params)))
}

/// Fixed-radius KDE, renormalized to the input mass.
pub fn kde_fixed(buf: &DensityBuffer, r: u32) -> Result<DensityBuffer> {
    if r < 1 {
        return Err(Error::InvalidParam("radius must be >= 1".into()));
    }
    Ok(kde_with(buf, r, |_| r))
}

/// Categorical hues, one per subspace (cycled).
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Normalized display intensity per pixel: log1p, min-max, then gamma.
pub fn tone_intensity(buf: &DensityBuffer, gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParam("gamma must be positive".into()));
    }
    let logs: Vec<f64> = buf.values.iter().map(|&v| v.max(0.0).ln_1p()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(logs
        .iter()
        .map(|&l| {
            let t = if hi > lo {
                (l - lo) / (hi - lo)
            } else if l > 0.0 {
                1.0
            } else {
                0.0
            };
            t.powf(gamma)
        })
        .collect())
}

/// RGBA image: hue of the subspace, darker and more transparent where the
/// density is low. Full hue and opacity at the maximum.
pub fn tone_map(buf: &DensityBuffer, gamma: f64) -> Result<RgbaImage> {
    let t = tone_intensity(buf, gamma)?;
    let hue = PALETTE[buf.subspace % PALETTE.len()];
    let mut img = RgbaImage::new(buf.width as u32, buf.height as u32);
    for (i, &ti) in t.iter().enumerate() {
        let lum = 0.35 + 0.65 * ti;
        let px = Rgba([
            (hue[0] as f64 * lum).round() as u8,
            (hue[1] as f64 * lum).round() as u8,
            (hue[2] as f64 * lum).round() as u8,
            (255.0 * ti).round() as u8,
        ]);
        img.put_pixel((i % buf.width) as u32, (i / buf.width) as u32, px);
    }
    Ok(img)
}

pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn many_points_conserve_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<(f64, f64)> = (0..100_000).map(|_| (rng.random_range(-10.0..110.0), rng.random_range(-5.0..55.0))).collect();
        let b = splat_pixels(&pts, 100, 50, 0);
        assert_eq!(b.total_mass, 1e5);
        assert!((b.sum() - 1e5).abs() / 1e5 < 1e-6);
    }

    #[test]
    fn pixel_center_and_quad_center() {
        let b = splat_pixels(&[(3.5, 2.5)], 8, 6, 0);
        assert_eq!(b.at(3, 2), 1.0);
        assert_eq!(b.sum(), 1.0);
        let b = splat_pixels(&[(4.0, 3.0)], 8, 6, 0);
        for (x, y) in [(3, 2), (4, 2), (3, 3), (4, 3)] {
            assert_eq!(b.at(x, y), 0.25);
        }
    }

    #[test]
    fn viewport_maps_band_to_image() {
        let l = AxisLayout::new(3);
        let vp = Viewport::for_subspace(&l, 1, 900, 300);
        assert_eq!(vp.to_pixel(0.0, V_MAX), (0.0, 0.0));
        let (x, y) = vp.to_pixel(3.0, V_MIN);
        assert!((x - 900.0).abs() < 1e-9 && (y - 300.0).abs() < 1e-9);
        let (u, v) = vp.to_uv(450.0, 150.0);
        assert!((u - 1.5).abs() < 1e-12 && (v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kernel_integrates_to_one() {
        let n = 1000;
        let h = 2.0 / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = -1.0 + (i as f64 + 0.5) * h;
                let y = -1.0 + (j as f64 + 0.5) * h;
                s += epanechnikov((x * x + y * y).sqrt()) * h * h;
            }
        }
        assert!((s - 1.0).abs() < 1e-4, "{s}");
    }

    #[test]
    fn isolated_point_gives_parabolic_blob() {
        let mut b = DensityBuffer::zeros(21, 21, 0);
        b.values[10 * 21 + 10] = 1.0;
        b.total_mass = 1.0;
        let p = KdeParams { r_max: 5, mass_cap: 10.0 };
        let radii = kde_radii(&b, &p);
        assert!(radii.iter().all(|&r| r == 5));
        let pt = build_kdtree2(&b);
        let raw = kernel_sum(&neighbors(&pt, [10.5, 10.5], 5.0), 5);
        assert!((raw - 2.0 / (PI * 25.0)).abs() < 1e-12);
        let k = kde_dynamic(&b, &p).unwrap();
        for y in 0..21 {
            for x in 0..21 {
                let d = ((x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)).sqrt();
                assert_eq!(k.at(x, y) > 0.0, d < 5.0);
            }
        }
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_cluster_uses_small_radius() {
        let mut b = DensityBuffer::zeros(40, 20, 0);
        b.values[10 * 40 + 10] = 500.0;
        for x in 25..35 {
            b.values[10 * 40 + x] = 0.2;
        }
        b.total_mass = b.sum();
        let p = KdeParams { r_max: 6, mass_cap: 50.0 };
        let r = kde_radii(&b, &p);
        assert_eq!(r[10 * 40 + 10], 1);
        assert_eq!(r[10 * 40 + 30], 6);
    }

    #[test]
    fn zero_input_stays_zero() {
        let b = DensityBuffer::zeros(10, 10, 0);
        let k = kde_dynamic(&b, &KdeParams::default()).unwrap();
        assert!(k.values.iter().all(|&v| v == 0.0));
        let img = tone_map(&b, 1.0).unwrap();
        assert!(img.pixels().all(|p| p[3] == 0));
    }

    #[test]
    fn constant_buffer_maps_to_full() {
        let mut b = DensityBuffer::zeros(4, 4, 2);
        b.values.fill(3.0);
        let t = tone_intensity(&b, 0.7).unwrap();
        assert!(t.iter().all(|&x| x == 1.0));
        let img = tone_map(&b, 0.7).unwrap();
        let first = *img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| *p == first));
        assert_eq!(first, Rgba([PALETTE[2][0], PALETTE[2][1], PALETTE[2][2], 255]));
    }

    #[test]
    fn lower_gamma_brightens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = DensityBuffer::zeros(30, 30, 0);
        b.values.iter_mut().for_each(|v| *v = rng.random::<f64>() * 50.0);
        let a = tone_intensity(&b, 1.0).unwrap();
        let h = tone_intensity(&b, 0.5).unwrap();
        assert!(a.iter().zip(&h).all(|(x, y)| y >= x));
        let imax = b.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(a[imax], 1.0);
    }

    #[test]
    fn bytes_roundtrip() {
        let mut b = DensityBuffer::zeros(5, 3, 4);
        b.values[7] = 2.5;
        b.total_mass = 2.5;
        let c = DensityBuffer::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(b, c);
        assert_eq!(b.content_hash(), c.content_hash());
        assert!(DensityBuffer::from_bytes(&b.to_bytes()[..30]).is_err());
    }

    proptest! {
        #[test]
        fn kde_preserves_mass_and_positivity(seed in 0u64..200, cap in 1.0f64..50.0, r_max in 1u32..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..300).map(|_| (rng.random_range(0.0..30.0), rng.random_range(0.0..20.0))).collect();
            let b = splat_pixels(&pts, 30, 20, 0);
            let k = kde_dynamic(&b, &KdeParams { r_max, mass_cap: cap }).unwrap();
            prop_assert!(k.values.iter().all(|&v| v >= 0.0));
            prop_assert!((k.sum() - b.sum()).abs() / b.sum() < 1e-3);
        }

        #[test]
        fn radius_non_increasing_in_mass(seed in 0u64..200, scale in 1.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..200).map(|_| (rng.random_range(0.0..25.0), rng.random_range(0.0..25.0))).collect();
            let b = splat_pixels(&pts, 25, 25, 0);
            let mut heavier = b.clone();
            heavier.values.iter_mut().for_each(|v| *v *= scale);
            let p = KdeParams { r_max: 6, mass_cap: 8.0 };
            let (ra, rb) = (kde_radii(&b, &p), kde_radii(&heavier, &p));
            prop_assert!(ra.iter().zip(&rb).all(|(a, b)| b <= a));
        }
    }
}
