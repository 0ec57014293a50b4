//! Synthetic multivariate volumes with known ground truth: spatial
//! structures (spheres, domes, boxes) filled with correlated Gaussian
//! attribute tuples, plus a label volume marking structure membership.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classify::{BrushWidget, TransferFunctionSet, WidgetShape};
use crate::error::{Error, Result};
use crate::indexed::{angle_uniform, dual_1flat, AxisLayout};
use crate::volume::{Grid, LabelVolume, MultivariateVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Half ball: points of the ball on the side of `normal`.
    Dome { center: [f64; 3], radius: f64, normal: [f64; 3] },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius } => dist2(p, *center) <= radius * radius,
            Shape::Dome { center, radius, normal } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                dist2(p, *center) <= radius * radius && d[0] * normal[0] + d[1] * normal[1] + d[2] * normal[2] >= 0.0
            }
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Sphere { center, radius } | Shape::Dome { center, radius, .. } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
            Shape::Box { min, max } => (*min, *max),
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Attribute-tuple distribution of a structure or the background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Constant {
        value: Vec<f64>,
    },
    /// Elongated Gaussian: spread `major_sd` along a principal direction
    /// whose projection onto each adjacent attribute pair (i, i+1) has
    /// orientation `orientations[i]` (radians, in (−π/2, π/2]), plus
    /// isotropic spread `minor_sd`.
    Gaussian {
        mean: Vec<f64>,
        orientations: Vec<f64>,
        major_sd: f64,
        minor_sd: f64,
    },
    /// Smooth field: values move along the principal direction linearly
    /// with the spatial coordinate `(p - origin)·axis / scale`.
    Ramp {
        mean: Vec<f64>,
        orientations: Vec<f64>,
        amplitude: f64,
        origin: [f64; 3],
        axis: [f64; 3],
        scale: f64,
    },
    /// Per-voxel random choice between components (weights need not sum to 1).
    Mixture {
        components: Vec<(f64, Distribution)>,
    },
}

/// Unit principal direction realizing the per-pair orientations.
pub fn principal_direction(orientations: &[f64]) -> Vec<f64> {
    let m = orientations.len() + 1;
    let mut v = vec![0.0; m];
    v[0] = 1.0;
    for (i, &th) in orientations.iter().enumerate() {
        let (s, c) = th.sin_cos();
        if c.abs() < 1e-12 {
            v[..=i].iter_mut().for_each(|x| *x = 0.0);
            v[i + 1] = 1.0;
        } else {
            v[i + 1] = v[i] * s / c;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

impl Distribution {
    fn dim(&self) -> Option<usize> {
        match self {
            Distribution::Constant { value } => Some(value.len()),
            Distribution::Gaussian { mean, .. } | Distribution::Ramp { mean, .. } => Some(mean.len()),
            Distribution::Mixture { components } => components.first().and_then(|(_, d)| d.dim()),
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        match self {
            Distribution::Constant { value } if value.len() != m => bad(format!("constant has {} values, expected {m}", value.len())),
            Distribution::Gaussian { mean, orientations, .. } | Distribution::Ramp { mean, orientations, .. } => {
                if mean.len() != m || orientations.len() + 1 != m {
                    return bad(format!("distribution needs {m} means and {} orientations", m - 1));
                }
                if let Some(o) = orientations.iter().find(|&&o| !(o > -FRAC_PI_2 && o <= FRAC_PI_2)) {
                    return bad(format!("orientation {o} outside (-pi/2, pi/2]"));
                }
                Ok(())
            }
            Distribution::Mixture { components } => {
                if components.is_empty() {
                    return bad("empty mixture".into());
                }
                components.iter().try_for_each(|(w, d)| {
                    if !(*w >= 0.0) {
                        return bad(format!("negative mixture weight {w}"));
                    }
                    d.validate(m)
                })
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, p: [f64; 3], rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            Distribution::Constant { value } => out.copy_from_slice(value),
            Distribution::Gaussian {
                mean,
                orientations,
                major_sd,
                minor_sd,
            } => {
                let v = principal_direction(orientations);
                let t: f64 = rng.sample::<f64, _>(StandardNormal) * major_sd;
                for i in 0..out.len() {
                    let n: f64 = rng.sample::<f64, _>(StandardNormal) * minor_sd;
                    out[i] = mean[i] + t * v[i] + n;
                }
            }
            Distribution::Ramp {
                mean,
                orientations,
                amplitude,
                origin,
                axis,
                scale,
            } => {
                let v = principal_direction(orientations);
                let s = ((p[0] - origin[0]) * axis[0] + (p[1] - origin[1]) * axis[1] + (p[2] - origin[2]) * axis[2]) / scale;
                for i in 0..out.len() {
                    out[i] = mean[i] + amplitude * s * v[i];
                }
            }
            Distribution::Mixture { components } => {
                let total: f64 = components.iter().map(|(w, _)| w).sum();
                let mut r = rng.random::<f64>() * total;
                for (w, d) in components {
                    if r < *w {
                        return d.sample(p, rng, out);
                    }
                    r -= w;
                }
                components.last().unwrap().1.sample(p, rng, out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub shape: Shape,
    pub distribution: Distribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dims: [usize; 3],
    pub attr_names: Vec<String>,
    pub background: Distribution,
    /// Later structures win where shapes overlap; structure k gets label k+1.
    pub structures: Vec<Structure>,
}

impl SyntheticSpec {
    pub fn attr_count(&self) -> usize {
        self.attr_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.attr_count();
        if m < 2 {
            return Err(Error::TooFewAttributes(m));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidParam("synthetic dims must be positive".into()));
        }
        self.background.validate(m)?;
        for (k, s) in self.structures.iter().enumerate() {
            s.distribution.validate(m)?;
            let (lo, hi) = s.shape.bounds();
            for a in 0..3 {
                if lo[a] < -1e-9 || hi[a] > (self.dims[a] - 1) as f64 + 1e-9 {
                    return Err(Error::InvalidParam(format!("structure {k} does not fit inside dims {:?}", self.dims)));
                }
            }
        }
        debug_assert!(self.background.dim() == Some(m));
        Ok(())
    }
}

/// Generate the volume and its label volume. Deterministic for a fixed seed;
/// values are clamped to [0, 1] before per-attribute normalization.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(MultivariateVolume, LabelVolume)> {
    spec.validate()?;
    let grid = Grid::new(spec.dims);
    let m = spec.attr_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attrs = vec![vec![0.0f32; grid.len()]; m];
    let mut labels = vec![0u16; grid.len()];
    let mut tuple = vec![0.0; m];
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        let p = [c[0] as f64, c[1] as f64, c[2] as f64];
        let mut label = 0u16;
        let mut dist = &spec.background;
        for (k, s) in spec.structures.iter().enumerate() {
            if s.shape.contains(p) {
                label = k as u16 + 1;
                dist = &s.distribution;
            }
        }
        dist.sample(p, &mut rng, &mut tuple);
        for (a, &t) in attrs.iter_mut().zip(tuple.iter()) {
            a[idx] = t.clamp(0.0, 1.0) as f32;
        }
        labels[idx] = label;
    }
    // Compact labels so ids form 0..=k even when a structure is fully hidden.
    let mut present: Vec<u16> = labels.clone();
    present.push(0);
    present.sort_unstable();
    present.dedup();
    if present.iter().enumerate().any(|(i, &l)| i as u16 != l) {
        let mut remap = vec![0u16; spec.structures.len() + 1];
        for (i, &l) in present.iter().enumerate() {
            remap[l as usize] = i as u16;
        }
        labels.iter_mut().for_each(|l| *l = remap[*l as usize]);
    }
    let named = spec.attr_names.iter().cloned().zip(attrs).collect();
    let vol = MultivariateVolume::new(spec.dims, [1.0; 3], named)?;
    Ok((vol, LabelVolume { grid, labels }))
}

/// Per-pair orientations of the ground-truth structures of the `a3` preset,
/// in the order inner sphere, upper dome, lower dome.
pub const A3_ORIENTATIONS: [[f64; 2]; 3] = [
    [FRAC_PI_6, A3_INNER_SECOND],
    [FRAC_PI_4, A3_UPPER_SECOND],
    [-FRAC_PI_4, A3_LOWER_SECOND],
];
const A3_INNER_SECOND: f64 = FRAC_PI_4;
// Second-pair angles chosen so the dome principal directions are
// orthogonal to the inner sphere's in the full attribute space.
const A3_UPPER_SECOND: f64 = -1.219_916_915_922_638_8; // atan(-(1 + tan 30°) / tan 30°)
const A3_LOWER_SECOND: f64 = 0.631_914_312_375_071_5; // atan((1 - tan 30°) / tan 30°)
pub const A3_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const A3_MAJOR_SD: f64 = 0.2;
pub const A3_MINOR_SD: f64 = 0.03;

/// Labels of the `a3` preset.
pub const A3_INNER: u16 = 3;
pub const A3_UPPER: u16 = 1;
pub const A3_LOWER: u16 = 2;

fn a3_layout(dims: [usize; 3]) -> ([f64; 3], f64, f64) {
    let c = [
        (dims[0] - 1) as f64 / 2.0,
        (dims[1] - 1) as f64 / 2.0,
        (dims[2] - 1) as f64 / 2.0,
    ];
    let half = dims.iter().map(|&d| (d - 1) as f64 / 2.0).fold(f64::INFINITY, f64::min);
    (c, half * 0.97, half * 0.6)
}

fn gaussian(orient: [f64; 2], major_sd: f64) -> Distribution {
    Distribution::Gaussian {
        mean: A3_MEAN.to_vec(),
        orientations: orient.to_vec(),
        major_sd,
        minor_sd: A3_MINOR_SD,
    }
}

/// Sphere filled with three correlated Gaussians: an inner sphere at π/6 in
/// the first attribute pair and two domes at ±π/4. The background is a dense
/// blob plus spatially incoherent draws from the structures' distributions.
pub fn a3_spec(dims: [usize; 3]) -> SyntheticSpec {
    let (c, outer, inner) = a3_layout(dims);
    let [o_inner, o_upper, o_lower] = A3_ORIENTATIONS;
    let blob = Distribution::Gaussian {
        mean: vec![0.5, 0.1, 0.5],
        orientations: vec![0.0, 0.0],
        major_sd: 0.0,
        minor_sd: 0.02,
    };
    SyntheticSpec {
        dims,
        attr_names: vec!["a".into(), "b".into(), "c".into()],
        background: Distribution::Mixture {
            components: vec![
                (0.7, blob),
                (0.1, gaussian(o_inner, A3_MAJOR_SD)),
                (0.1, gaussian(o_upper, A3_MAJOR_SD)),
                (0.1, gaussian(o_lower, A3_MAJOR_SD)),
            ],
        },
        structures: vec![
            Structure {
                shape: Shape::Dome {
                    center: c,
                    radius: outer,
                    normal: [0.0, 0.0, 1.0],
                },
                distribution: gaussian(o_upper, A3_MAJOR_SD),
            },
            Structure {
                shape: Shape::Dome {
                    center: c,
                    radius: outer,
                    normal: [0.0, 0.0, -1.0],
                },
                distribution: gaussian(o_lower, A3_MAJOR_SD),
            },
            Structure {
                shape: Shape::Sphere { center: c, radius: inner },
                distribution: gaussian(o_inner, A3_MAJOR_SD),
            },
        ],
    }
}

/// Same layout as [`a3_spec`] but with smooth ramps instead of noise and a
/// constant background, so large regions are homogeneous.
pub fn a3_smooth_spec(dims: [usize; 3]) -> SyntheticSpec {
    let (c, outer, inner) = a3_layout(dims);
    let [o_inner, o_upper, o_lower] = A3_ORIENTATIONS;
    let ramp = |orient: [f64; 2], axis: [f64; 3], scale: f64| Distribution::Ramp {
        mean: A3_MEAN.to_vec(),
        orientations: orient.to_vec(),
        amplitude: 0.35,
        origin: c,
        axis,
        scale,
    };
    SyntheticSpec {
        dims,
        attr_names: vec!["a".into(), "b".into(), "c".into()],
        background: Distribution::Constant {
            value: vec![0.5, 0.1, 0.5],
        },
        structures: vec![
            Structure {
                shape: Shape::Dome {
                    center: c,
                    radius: outer,
                    normal: [0.0, 0.0, 1.0],
                },
                distribution: ramp(o_upper, [1.0, 0.0, 0.0], outer),
            },
            Structure {
                shape: Shape::Dome {
                    center: c,
                    radius: outer,
                    normal: [0.0, 0.0, -1.0],
                },
                distribution: ramp(o_lower, [0.0, 1.0, 0.0], outer),
            },
            Structure {
                shape: Shape::Sphere { center: c, radius: inner },
                distribution: ramp(o_inner, [0.0, 0.0, 1.0], inner),
            },
        ],
    }
}

/// Named presets accepted by descriptors and the CLI.
pub fn preset(name: &str, dims: [usize; 3]) -> Option<SyntheticSpec> {
    match name {
        "a3" => Some(a3_spec(dims)),
        "a3-smooth" => Some(a3_smooth_spec(dims)),
        _ => None,
    }
}

/// Display colors of the `a3` structures, in [`A3_ORIENTATIONS`] order.
pub const A3_COLORS: [[f64; 3]; 3] = [[1.0, 0.5, 0.05], [0.12, 0.47, 0.71], [0.17, 0.63, 0.17]];
/// Labels in [`A3_ORIENTATIONS`] order.
pub const A3_LABELS: [u16; 3] = [A3_INNER, A3_UPPER, A3_LOWER];

/// Brushes on the given attribute-pair subspaces (identity axis order) at
/// the ground-truth angle of every `a3` structure: `half_angle` radians
/// either side in `u`, `v_half` either side of the line through the
/// distribution mean. Windows that cross a band edge get a wrapped twin in
/// a fresh tID group. Widget colors follow [`A3_COLORS`].
pub fn a3_preset_tf_on(pairs: &[usize], half_angle: f64, v_half: f64, opacity: f64) -> TransferFunctionSet {
    let layout = AxisLayout::new(3);
    let mut widgets = Vec::new();
    for &pair in pairs {
        let (lo, hi) = layout.band(pair);
        let x_left = layout.x_left(pair);
        widgets.extend(preset_widgets(pair, lo, hi, x_left, layout.d, half_angle, v_half, opacity, widgets.len()));
    }
    TransferFunctionSet {
        widgets,
        axis_brushes: Vec::new(),
    }
}

/// The `a3` preset on the first attribute pair.
pub fn a3_preset_tf(half_angle: f64, v_half: f64, opacity: f64) -> TransferFunctionSet {
    a3_preset_tf_on(&[0], half_angle, v_half, opacity)
}

#[allow(clippy::too_many_arguments)]
fn preset_widgets(pair: usize, lo: f64, hi: f64, x_left: f64, d: f64, half_angle: f64, v_half: f64, opacity: f64, first_tid: usize) -> Vec<BrushWidget> {
    let mut widgets = Vec::new();
    for (k, orient) in A3_ORIENTATIONS.iter().enumerate() {
        let line = dual_1flat(A3_MEAN[pair], A3_MEAN[pair + 1], orient[pair].cos(), orient[pair].sin()).expect("finite direction");
        let (u, v) = angle_uniform(&line, x_left, d);
        let du = 3.0 * d * half_angle / std::f64::consts::PI;
        let mut centers = vec![u];
        if u - du < lo {
            centers.push(u + (hi - lo));
        }
        if u + du > hi {
            centers.push(u - (hi - lo));
        }
        for c in centers {
            widgets.push(BrushWidget {
                shape: WidgetShape::Rect {
                    u0: c - du,
                    v0: v - v_half,
                    u1: c + du,
                    v1: v + v_half,
                },
                sid: pair as i64,
                tid: (first_tid + widgets.len()) as u32,
                color: A3_COLORS[k],
                opacity,
                falloff: 0.0,
            });
        }
    }
    widgets
}

/// Label of the `a3` structure whose preset color a widget carries.
pub fn a3_label_of_color(color: [f64; 3]) -> Option<u16> {
    A3_COLORS.iter().position(|c| *c == color).map(|k| A3_LABELS[k])
}
