//! Multivariate saliency: per-attribute gradient magnitudes, each min-max
//! normalized, summed, then low-pass filtered with a box of the fitting
//! neighborhood's size.

use serde::{Deserialize, Serialize};

use crate::volume::{Grid, MultivariateVolume};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyField {
    pub grid: Grid,
    pub raw: Vec<f64>,
    pub filtered: Vec<f64>,
    pub filter_radius: usize,
}

impl SaliencyField {
    pub fn compute(vol: &MultivariateVolume, filter_radius: usize) -> Self {
        let raw = compute_saliency(vol);
        let filtered = smooth_saliency(vol.grid(), &raw, filter_radius);
        SaliencyField {
            grid: vol.grid(),
            raw,
            filtered,
            filter_radius,
        }
    }
}

/// S(x) = Σ_i normalize(‖∇τ_i(x)‖).
pub fn compute_saliency(vol: &MultivariateVolume) -> Vec<f64> {
    let mut s = vec![0.0f64; vol.voxel_count()];
    for a in 0..vol.attr_count() {
        let g = vol.gradient_magnitude(a);
        let (lo, hi) = g
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
        let span = hi - lo;
        if span > 0.0 {
            for (acc, &v) in s.iter_mut().zip(g.iter()) {
                *acc += (v as f64 - lo) / span;
            }
        }
    }
    s
}

/// Separable box filter of width `2·radius + 1`. Windows are clipped at the
/// volume boundary and averaged over the voxels they cover, so constant
/// fields stay constant.
pub fn smooth_saliency(grid: Grid, s: &[f64], radius: usize) -> Vec<f64> {
    if radius == 0 {
        return s.to_vec();
    }
    let mut cur = s.to_vec();
    let mut next = vec![0.0; s.len()];
    let d = grid.dims;
    for axis in 0..3 {
        let n = d[axis];
        let stride = match axis {
            0 => 1,
            1 => d[0],
            _ => d[0] * d[1],
        };
        let mut line = vec![0.0; n];
        let mut prefix = vec![0.0; n + 1];
        for start in line_starts(grid, axis) {
            for i in 0..n {
                line[i] = cur[start + i * stride];
            }
            for i in 0..n {
                prefix[i + 1] = prefix[i] + line[i];
            }
            for i in 0..n {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius + 1).min(n);
                next[start + i * stride] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

fn line_starts(grid: Grid, axis: usize) -> Vec<usize> {
    let d = grid.dims;
    let mut out = Vec::new();
    match axis {
        0 => {
            for z in 0..d[2] {
                for y in 0..d[1] {
                    out.push(grid.index(0, y, z));
                }
            }
        }
        1 => {
            for z in 0..d[2] {
                for x in 0..d[0] {
                    out.push(grid.index(x, 0, z));
                }
            }
        }
        _ => {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    out.push(grid.index(x, y, 0));
                }
            }
        }
    }
    out
}
