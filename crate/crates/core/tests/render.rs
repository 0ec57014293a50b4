mod common;

use common::{homogeneous, slab_probes, slab_scene};

use cipvol_core::classify::ColorOpacityVolume;
use cipvol_core::render::*;
use cipvol_core::volume::Grid;

#[test]
fn occlusion_behind_slab_darker_than_beside() {
    let sigma = -(1.0f32 - 0.99).ln();
    let (behind, beside) = slab_probes(&slab_scene(sigma));
    assert!(behind < beside, "behind {behind} beside {beside}");
}

#[test]
fn doubling_extinction_never_brightens() {
    let sigma = -(1.0f32 - 0.5).ln();
    let a = slab_scene(sigma);
    let b = slab_scene(2.0 * sigma);
    let cone = ConeParams::default();
    let dirs = oriented_cone([0.3, 0.1, 1.0], &cone);
    for z in [0.0, 4.0, 8.0, 11.0, 15.0] {
        for x in [2.0, 9.0, 11.5, 14.0, 20.0] {
            let p = [x, 12.0, z];
            let fa = occlusion_factor(&a, p, &dirs, cone.max_distance, 1.0, 0.0);
            let fb = occlusion_factor(&b, p, &dirs, cone.max_distance, 1.0, 0.0);
            assert!(fb <= fa + 1e-15, "at {p:?}: {fb} > {fa}");
        }
    }
}

#[test]
fn homogeneous_medium_transmittance() {
    let v = homogeneous(0.04);
    let exact = (-(0.04f32 as f64) * 40.0).exp();
    for rate in [0.5, 1.0, 2.0, 3.7] {
        let t = transmittance(&v, [-3.0, 3.5, 3.5], [1.0, 0.0, 0.0], f64::INFINITY, 1.0 / rate);
        assert!((t - exact).abs() / exact < 0.01, "rate {rate}: {t} vs {exact}");
    }
}

#[test]
fn rendered_opacity_step_size_invariant() {
    // white medium on black: pixel value = 1 − transmittance with shading off
    let v = homogeneous(0.04);
    let cam = Camera {
        eye: [-200.0, 3.5, 3.5],
        look_at: [0.0, 3.5, 3.5],
        up: [0.0, 0.0, 1.0],
        fov_deg: 0.5,
        width: 3,
        height: 3,
    };
    let lum = |rate: f64| {
        let p = RenderParams {
            sampling_rate: rate,
            ambient: 1.0,
            ..Default::default()
        };
        raycast_linear(&v, &cam, &p, None).unwrap()[4][0]
    };
    let (a, b) = (lum(0.5), lum(2.0));
    let exact = 1.0 - (-(0.04f32 as f64) * 40.0).exp();
    assert!((a - b).abs() / b < 0.02);
    assert!((lum(1.0) - exact).abs() / exact < 0.01);
}

#[test]
fn box_silhouette_matches_projection() {
    let g = Grid::new([32, 32, 32]);
    let mut v = ColorOpacityVolume::transparent(g);
    let (lo, hi) = ([8usize, 10, 12], [20usize, 18, 22]);
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                v.rgba[g.index(x, y, z)] = [1.0; 4];
            }
        }
    }
    let v = ColorOpacityVolume::from_rgba(g, v.rgba);
    let cam = Camera {
        eye: [15.5, 15.5, 2000.0],
        look_at: [15.5, 15.5, 0.0],
        up: [0.0, 1.0, 0.0],
        fov_deg: 1.2,
        width: 64,
        height: 64,
    };
    let b = cam.basis().unwrap();
    let params = RenderParams {
        ambient: 1.0,
        ..Default::default()
    };
    let img = raycast_linear(&v, &cam, &params, None).unwrap();
    // analytic footprint of the top face of the box cells, where the
    // interpolated opacity crosses one half
    let p0 = cam.project(&b, [lo[0] as f64 - 0.5, lo[1] as f64 - 0.5, hi[2] as f64 - 0.5]).unwrap();
    let p1 = cam.project(&b, [hi[0] as f64 - 0.5, hi[1] as f64 - 0.5, hi[2] as f64 - 0.5]).unwrap();
    let (x0, x1) = (p0[0].min(p1[0]), p0[0].max(p1[0]));
    let (y0, y1) = (p0[1].min(p1[1]), p0[1].max(p1[1]));
    let mut mismatches = 0;
    for j in 0..64 {
        for i in 0..64 {
            let (cx, cy) = (i as f64 + 0.5, j as f64 + 0.5);
            let inside = cx > x0 && cx < x1 && cy > y0 && cy < y1;
            let covered = img[j * 64 + i][0] > 0.5;
            if inside != covered {
                let edge = (cx - x0).abs().min((cx - x1).abs()).min((cy - y0).abs()).min((cy - y1).abs());
                assert!(edge <= 1.0, "pixel ({i}, {j}) off by {edge}");
                mismatches += 1;
            }
        }
    }
    assert!(mismatches < 64 * 4);
}

#[test]
fn sampling_rate_convergence() {
    let g = Grid::new([24, 24, 24]);
    let mut v = ColorOpacityVolume::transparent(g);
    for z in 6..18 {
        for y in 6..18 {
            for x in 6..18 {
                let a = 0.3f32;
                v.rgba[g.index(x, y, z)] = [a * (x as f32 / 24.0), a * 0.5, a * (z as f32 / 24.0), a];
            }
        }
    }
    let v = ColorOpacityVolume::from_rgba(g, v.rgba);
    let cam = Camera::default_for(g, 48, 48);
    let run = |rate| {
        let p = RenderParams {
            sampling_rate: rate,
            ..Default::default()
        };
        raycast_linear(&v, &cam, &p, None).unwrap()
    };
    let (a, b) = (run(0.5), run(1.0));
    let mae: f64 = a.iter().zip(&b).flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs())).sum::<f64>() / (a.len() * 3) as f64;
    assert!(mae <= 0.05, "mean abs diff {mae}");
}

#[test]
fn deterministic_frames() {
    let v = slab_scene(1.0);
    let cam = Camera::default_for(v.grid, 32, 32);
    let p = RenderParams::default();
    assert_eq!(raycast(&v, &cam, &p, None).unwrap(), raycast(&v, &cam, &p, None).unwrap());
}

#[test]
fn phong_requires_field() {
    let v = slab_scene(1.0);
    let cam = Camera::default_for(v.grid, 8, 8);
    let p = RenderParams {
        shading: Shading::Phong,
        ..Default::default()
    };
    assert!(raycast(&v, &cam, &p, None).is_err());
    let field: Vec<f32> = (0..v.grid.len()).map(|i| v.grid.coords(i)[2] as f32 / 24.0).collect();
    assert!(raycast(&v, &cam, &p, Some(&field)).is_ok());
}

#[test]
fn golden_a3_preset() {
    let t = std::time::Instant::now();
    let img = common::render_golden_scene();
    let err = common::golden_error(&img);
    eprintln!("golden render {:?}, mean channel error {err:.3}", t.elapsed());
    assert!(err <= 2.0, "mean channel error {err} > 2/255");
}
