//! Indexed points: the parallel-coordinates duals of local 1-flats (lines in
//! adjacent axis pairs) and 2-flats (planes in adjacent axis triples),
//! mapped into a bounded band by the angle-uniform transformation.
//!
//! Subspace ids: pair `i` (axes `order[i]`, `order[i+1]`) is id `i`; triple
//! `i` (axes `order[i..i+3]`) is id `m - 1 + i`. Both place their left axis
//! at `x_left = i·d` and own the band `[x_left - d, x_left + 2d)`.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitVolume;
use crate::volume::Grid;

pub const V_MIN: f64 = -0.25;
pub const V_MAX: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisLayout {
    pub m: usize,
    /// Axis spacing in image units.
    pub d: f64,
}

impl AxisLayout {
    pub fn new(m: usize) -> Self {
        AxisLayout { m, d: 1.0 }
    }

    pub fn axis_x(&self, i: usize) -> f64 {
        i as f64 * self.d
    }

    pub fn pair_count(&self) -> usize {
        self.m.saturating_sub(1)
    }

    pub fn triple_count(&self) -> usize {
        self.m.saturating_sub(2)
    }

    pub fn subspace_count(&self, do2flat: bool) -> usize {
        self.pair_count() + if do2flat { self.triple_count() } else { 0 }
    }

    /// Flat order (1 or 2) and position of the subspace's first axis.
    pub fn subspace(&self, id: usize) -> (u8, usize) {
        if id < self.pair_count() {
            (1, id)
        } else {
            (2, id - self.pair_count())
        }
    }

    pub fn x_left(&self, id: usize) -> f64 {
        self.axis_x(self.subspace(id).1)
    }

    /// Horizontal extent `[lo, hi)` of the subspace's band.
    pub fn band(&self, id: usize) -> (f64, f64) {
        let x = self.x_left(id);
        (x - self.d, x + 2.0 * self.d)
    }
}

/// Line `c1·a + c2·b + c3 = 0` in a subspace's data plane, plus the
/// orientation of its direction folded into [0, π).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousLine {
    pub c: [f64; 3],
    pub phi: f64,
}

fn fold_angle(phi: f64) -> f64 {
    let f = phi.rem_euclid(PI);
    if f >= PI {
        0.0
    } else {
        f
    }
}

impl HomogeneousLine {
    /// Line from homogeneous coefficients; `None` when (c1, c2) vanish.
    pub fn from_coeffs(c: [f64; 3]) -> Option<Self> {
        let n = c[0].hypot(c[1]);
        if !(n > 1e-12) {
            return None;
        }
        // direction (c2, -c1)
        let phi = fold_angle(f64::atan2(-c[0], c[1]));
        Some(HomogeneousLine {
            c: [c[0] / n, c[1] / n, c[2] / n],
            phi,
        })
    }

    /// Pre-transform dual point of the line between axes at `x_left` and
    /// `x_left + d`, homogeneous (w = 0 for slope-1 lines).
    pub fn dual_point(&self, x_left: f64, d: f64) -> [f64; 3] {
        let [c1, c2, c3] = self.c;
        [x_left * (c1 + c2) + d * c2, -c3, c1 + c2]
    }
}

/// Dual line of a 1-flat through `(xa, xb)` with direction `(ea, eb)`.
pub fn dual_1flat(xa: f64, xb: f64, ea: f64, eb: f64) -> Option<HomogeneousLine> {
    if ea.abs() + eb.abs() < 1e-9 {
        return None;
    }
    let n = ea.hypot(eb);
    let (c1, c2) = (-eb / n, ea / n);
    Some(HomogeneousLine {
        c: [c1, c2, -(c1 * xa + c2 * xb)],
        phi: fold_angle(eb.atan2(ea)),
    })
}

/// A 2-flat projected into three adjacent axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneDual {
    /// Plane `n·p = c0`.
    pub n: [f64; 3],
    pub c0: f64,
    /// Virtual 2D line whose pair dual coincides with the plane's indexed
    /// point: `(n1 - n3)·a + (n2 + 2·n3)·b - c0 = 0`.
    pub line: HomogeneousLine,
}

impl PlaneDual {
    /// Pre-transform indexed point, homogeneous.
    pub fn point(&self, x_left: f64, d: f64) -> [f64; 3] {
        let [n1, n2, n3] = self.n;
        let s = n1 + n2 + n3;
        [x_left * s + d * (n2 + 2.0 * n3), self.c0, s]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Plane through `xi` spanned by `e1`, `e2` (all projected to the triple).
/// `None` when the projected span degenerates, or the normal is ∝ (1, -2, 1)
/// which has no finite virtual line.
pub fn dual_2flat(xi: [f64; 3], e1: [f64; 3], e2: [f64; 3]) -> Option<PlaneDual> {
    let n = cross(e1, e2);
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if !(norm > 1e-9) {
        return None;
    }
    let n = n.map(|x| x / norm);
    let c0 = n[0] * xi[0] + n[1] * xi[1] + n[2] * xi[2];
    let line = HomogeneousLine::from_coeffs([n[0] - n[2], n[1] + 2.0 * n[2], -c0])?;
    Some(PlaneDual { n, c0, line })
}

/// Bounded image coordinates of a line's indexed point.
///
/// `u` is affine in the line angle measured from π/4, so slope −1 lands on
/// the inter-axis midpoint and slope +1 splits across the two band edges.
/// `v` encodes the signed distance of the line from the data-square center.
pub fn angle_uniform(line: &HomogeneousLine, x_left: f64, d: f64) -> (f64, f64) {
    let phi = line.phi;
    let normal = (-phi.sin(), phi.cos());
    let mut c = line.c;
    if c[0] * normal.0 + c[1] * normal.1 < 0.0 {
        c = c.map(|x| -x);
    }
    let folded = (phi - FRAC_PI_4).rem_euclid(PI);
    let folded = if folded >= PI { 0.0 } else { folded };
    let u = x_left - d + 3.0 * d * folded / PI;
    let s = -(0.5 * c[0] + 0.5 * c[1] + c[2]);
    let v = (0.5 + FRAC_1_SQRT_2 * s).clamp(V_MIN, V_MAX);
    (u, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedPoint {
    pub u: f64,
    pub v: f64,
    pub subspace: usize,
    pub flat_order: u8,
}

/// Indexed point of one voxel's fit in one subspace, or `None` if skipped.
pub fn indexed_point(fit_xi: &[f64], fit_e1: &[f64], fit_e2: &[f64], valid2flat: bool, order: &[usize], layout: &AxisLayout, id: usize) -> Option<IndexedPoint> {
    let (flat_order, i) = layout.subspace(id);
    let x_left = layout.axis_x(i);
    let line = if flat_order == 1 {
        let (a, b) = (order[i], order[i + 1]);
        dual_1flat(fit_xi[a], fit_xi[b], fit_e1[a], fit_e1[b])?
    } else {
        if !valid2flat {
            return None;
        }
        let ax = [order[i], order[i + 1], order[i + 2]];
        dual_2flat(ax.map(|a| fit_xi[a]), ax.map(|a| fit_e1[a]), ax.map(|a| fit_e2[a]))?.line
    };
    let (u, v) = angle_uniform(&line, x_left, layout.d);
    Some(IndexedPoint {
        u,
        v,
        subspace: id,
        flat_order,
    })
}

/// Per-voxel indexed points for a fixed axis order. Skipped entries hold NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedPointVolume {
    pub grid: Grid,
    pub layout: AxisLayout,
    pub axis_order: Vec<usize>,
    pub do2flat: bool,
    pub subspaces: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl IndexedPointVolume {
    pub fn get(&self, voxel: usize, subspace: usize) -> Option<IndexedPoint> {
        let k = voxel * self.subspaces + subspace;
        let u = self.u[k];
        (!u.is_nan()).then(|| IndexedPoint {
            u,
            v: self.v[k],
            subspace,
            flat_order: self.layout.subspace(subspace).0,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.grid.len()
    }

    /// Every valid point of one subspace.
    pub fn points(&self, subspace: usize) -> impl Iterator<Item = (usize, IndexedPoint)> + '_ {
        (0..self.voxel_count()).filter_map(move |v| self.get(v, subspace).map(|p| (v, p)))
    }

    pub fn valid_count(&self, subspace: usize) -> usize {
        (0..self.voxel_count()).filter(|&v| !self.u[v * self.subspaces + subspace].is_nan()).count()
    }
}

pub fn validate_order(order: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    if order.len() != m {
        return Err(Error::InvalidParam(format!("axis order has {} entries, expected {m}", order.len())));
    }
    for &a in order {
        if a >= m || std::mem::replace(&mut seen[a], true) {
            return Err(Error::InvalidParam(format!("axis order {order:?} is not a permutation of 0..{m}")));
        }
    }
    Ok(())
}

pub fn build_indexed_volumes(fv: &FitVolume, axis_order: &[usize], layout: AxisLayout, do2flat: bool) -> Result<IndexedPointVolume> {
    validate_order(axis_order, fv.m)?;
    if layout.m != fv.m {
        return Err(Error::InvalidParam("layout axis count differs from fit volume".into()));
    }
    if do2flat && fv.m < 3 {
        return Err(Error::InvalidParam("2-flats need at least 3 attributes".into()));
    }
    let ns = layout.subspace_count(do2flat);
    let n = fv.voxel_count();
    let mut u = vec![f64::NAN; n * ns];
    let mut v = vec![f64::NAN; n * ns];
    u.par_chunks_mut(ns).zip(v.par_chunks_mut(ns)).enumerate().for_each(|(vox, (uu, vv))| {
        for s in 0..ns {
            if let Some(p) = indexed_point(fv.xi(vox), fv.e1(vox), fv.e2(vox), fv.valid2flat[vox], axis_order, &layout, s) {
                uu[s] = p.u;
                vv[s] = p.v;
            }
        }
    });
    Ok(IndexedPointVolume {
        grid: fv.grid,
        layout,
        axis_order: axis_order.to_vec(),
        do2flat,
        subspaces: ns,
        u,
        v,
    })
}
