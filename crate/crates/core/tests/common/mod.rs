#![allow(dead_code)]

use std::path::PathBuf;

use cipvol_core::classify::ColorOpacityVolume;
use cipvol_core::pipeline::{classify_and_render, precompute, PipelineParams};
use cipvol_core::density::{splat_pixels, DensityBuffer};
use cipvol_core::indexed::dual_1flat;
use cipvol_core::render::{occlusion_factor, oriented_cone, Camera, ConeParams, RenderParams};
use cipvol_core::synthetic::{a3_preset_tf, a3_spec, gen_synthetic};
use cipvol_core::volume::Grid;
use image::RgbaImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GOLDEN_DIMS: [usize; 3] = [32, 32, 32];
pub const GOLDEN_SEED: u64 = 1;

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/a3_preset.png")
}

/// The `a3` preset scene: 32³ synthetic, octree fits, preset brushes on the
/// first pair, default camera at 128×128.
pub fn render_golden_scene() -> RgbaImage {
    let (vol, _) = gen_synthetic(&a3_spec(GOLDEN_DIMS), GOLDEN_SEED).unwrap();
    let params = PipelineParams {
        width: 90,
        height: 30,
        kde: None,
        ..Default::default()
    };
    let pre = precompute(&vol, &params, None, &|_| {}).unwrap();
    let tf = a3_preset_tf(7f64.to_radians(), 0.15, 0.1);
    let cam = Camera::default_for(vol.grid(), 128, 128);
    classify_and_render(&vol, &pre, &tf, &cam, &RenderParams::default()).unwrap().1
}

/// Compare against the committed golden, rewriting it when UPDATE_GOLDEN=1.
/// Returns the mean per-channel error in 0..255 units.
pub fn golden_error(img: &RgbaImage) -> f64 {
    let path = golden_path();
    if std::env::var("UPDATE_GOLDEN").as_deref() == Ok("1") {
        img.save(&path).unwrap();
    }
    let golden = image::open(&path).expect("golden image missing; run with UPDATE_GOLDEN=1").to_rgba8();
    cipvol_core::render::mean_channel_error(img, &golden).expect("golden size differs")
}

pub fn slab_scene(sigma: f32) -> ColorOpacityVolume {
    // 24³ volume with a 3-voxel slab in z = 10..13 covering x, y in 0..12
    let g = Grid::new([24, 24, 24]);
    let mut v = ColorOpacityVolume::transparent(g);
    for z in 10..13 {
        for y in 0..24 {
            for x in 0..12 {
                let i = g.index(x, y, z);
                let a = 1.0 - (-sigma).exp();
                v.rgba[i] = [a, a, a, a];
                v.extinction[i] = sigma;
            }
        }
    }
    v
}

pub fn homogeneous(sigma: f32) -> ColorOpacityVolume {
    let g = Grid::new([40, 8, 8]);
    let a = 1.0 - (-sigma).exp();
    ColorOpacityVolume {
        grid: g,
        rgba: vec![[a; 4]; g.len()],
        extinction: vec![sigma; g.len()],
    }
}

/// Occlusion factors at a point behind the slab and one beside it, lit
/// from +z.
pub fn slab_probes(v: &ColorOpacityVolume) -> (f64, f64) {
    let cone = ConeParams::default();
    let dirs = oriented_cone([0.0, 0.0, 1.0], &cone);
    let behind = occlusion_factor(v, [5.0, 12.0, 5.0], &dirs, cone.max_distance, 1.0, 0.0);
    let beside = occlusion_factor(v, [19.0, 12.0, 5.0], &dirs, cone.max_distance, 1.0, 0.0);
    (behind, beside)
}

/// True when doubling the slab's extinction never raises the occlusion
/// factor at a grid of probe points.
pub fn slab_monotone() -> bool {
    let sigma = -(1.0f32 - 0.5).ln();
    let a = slab_scene(sigma);
    let b = slab_scene(2.0 * sigma);
    let cone = ConeParams::default();
    let dirs = oriented_cone([0.3, 0.1, 1.0], &cone);
    [0.0, 4.0, 8.0, 11.0, 15.0].iter().all(|&z| {
        [2.0, 9.0, 11.5, 14.0, 20.0].iter().all(|&x| {
            let p = [x, 12.0, z];
            occlusion_factor(&b, p, &dirs, cone.max_distance, 1.0, 0.0) <= occlusion_factor(&a, p, &dirs, cone.max_distance, 1.0, 0.0) + 1e-15
        })
    })
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Distance from a homogeneous point to the polyline segment line through
/// `(x_left, a)` and `(x_left + d, b)`. Ideal points (w ≈ 0) are measured by
/// the angle between the segment and the point's direction.
pub fn polyline_miss(p: [f64; 3], x_left: f64, d: f64, a: f64, b: f64) -> f64 {
    let l = cross([x_left, a, 1.0], [x_left + d, b, 1.0]);
    let ln = l[0].hypot(l[1]);
    if p[2].abs() > 1e-6 {
        (dot(l, p) / p[2]).abs() / ln
    } else {
        dot(l, p).abs() / (ln * p[0].hypot(p[1]))
    }
}

/// Dual points of a 3D line's projections into the (x1, x2) and (x2, x3)
/// axis pairs, with axes at 0, d, 2d. Homogeneous.
pub fn line_duals(p: [f64; 3], dir: [f64; 3], d: f64) -> ([f64; 3], [f64; 3]) {
    let l12 = dual_1flat(p[0], p[1], dir[0], dir[1]).expect("finite direction");
    let l23 = dual_1flat(p[1], p[2], dir[1], dir[2]).expect("finite direction");
    (l12.dual_point(0.0, d), l23.dual_point(d, d))
}

/// Indexed point of the plane through `p`, `q`, `r` by construction: every
/// line in the plane joins its two pair duals with a line through the
/// plane's point. Intersects the joins of lines PQ and PR and returns the
/// point with the distance of the QR join from it.
pub fn three_point_plane_oracle(p: [f64; 3], q: [f64; 3], r: [f64; 3], d: f64) -> ([f64; 2], f64) {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let join = |a: [f64; 3], b: [f64; 3]| {
        let (x, y) = line_duals(a, sub(b, a), d);
        cross(x, y)
    };
    let (j1, j2, j3) = (join(p, q), join(p, r), join(q, r));
    let x = cross(j1, j2);
    let pt = [x[0] / x[2], x[1] / x[2]];
    let miss = dot(j3, [pt[0], pt[1], 1.0]).abs() / j3[0].hypot(j3[1]);
    (pt, miss)
}

/// Unsigned angle between two directions, in degrees.
pub fn axis_angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs() / (na * nb);
    c.min(1.0).acos().to_degrees()
}

pub const RIDGE_ROW: usize = 150;

/// A one-pixel-thick horizontal ridge at [`RIDGE_ROW`] over a sparse
/// uniform background, 900×300.
pub fn ridge_buffer(seed: u64) -> DensityBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    for _ in 0..20_000 {
        pts.push((rng.random_range(100.0..800.0), RIDGE_ROW as f64 + 0.5 + rng.random_range(-0.3..0.3)));
    }
    for _ in 0..20_000 {
        pts.push((rng.random_range(0.0..900.0), rng.random_range(0.0..300.0)));
    }
    splat_pixels(&pts, 900, 300, 0)
}

/// Largest value on the ridge rows.
pub fn ridge_peak(buf: &DensityBuffer) -> f64 {
    (RIDGE_ROW - 1..=RIDGE_ROW + 1).flat_map(|y| (0..buf.width).map(move |x| (x, y))).map(|(x, y)| buf.at(x, y)).fold(0.0, f64::max)
}
