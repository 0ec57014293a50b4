//! Transfer functions on the indexed-point plane, axis-range brushes,
//! per-voxel classification into color and extinction, and kd-tree
//! brushing-and-linking between views.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fit::FitVolume;
use crate::indexed::{IndexedPoint, IndexedPointVolume};
use crate::kdtree::{point_in_polygon, KdTree};
use crate::volume::{Grid, MultivariateVolume};

/// Opacity is capped here before conversion to extinction.
pub const MAX_ALPHA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WidgetShape {
    Rect { u0: f64, v0: f64, u1: f64, v1: f64 },
    Lasso { points: Vec<[f64; 2]> },
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

impl WidgetShape {
    pub fn validate(&self) -> Result<()> {
        match self {
            WidgetShape::Rect { u0, v0, u1, v1 } => {
                if !(u0 < u1 && v0 < v1) {
                    return Err(Error::InvalidParam("rect needs u0 < u1 and v0 < v1".into()));
                }
            }
            WidgetShape::Lasso { points } => {
                if points.len() < 3 || points.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidParam("lasso needs at least 3 finite points".into()));
                }
                let n = points.len();
                for i in 0..n {
                    for j in i + 2..n {
                        if i == 0 && j == n - 1 {
                            continue;
                        }
                        if segments_cross(points[i], points[(i + 1) % n], points[j], points[(j + 1) % n]) {
                            return Err(Error::InvalidParam("lasso polygon self-intersects".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Closed for rectangles; crossing-number rule for lassos.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            WidgetShape::Rect { u0, v0, u1, v1 } => p[0] >= *u0 && p[0] <= *u1 && p[1] >= *v0 && p[1] <= *v1,
            WidgetShape::Lasso { points } => point_in_polygon(p, points),
        }
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            WidgetShape::Rect { u0, v0, u1, v1 } => ([*u0, *v0], [*u1, *v1]),
            WidgetShape::Lasso { points } => points.iter().fold(([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]), |(lo, hi), p| {
                ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
            }),
        }
    }

    /// Area centroid (vertex mean for degenerate polygons).
    pub fn centroid(&self) -> [f64; 2] {
        match self {
            WidgetShape::Rect { u0, v0, u1, v1 } => [(u0 + u1) / 2.0, (v0 + v1) / 2.0],
            WidgetShape::Lasso { points } => {
                let n = points.len();
                let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let (p, q) = (points[i], points[(i + 1) % n]);
                    let cr = p[0] * q[1] - q[0] * p[1];
                    a += cr;
                    cx += (p[0] + q[0]) * cr;
                    cy += (p[1] + q[1]) * cr;
                }
                if a.abs() < 1e-15 {
                    let k = n as f64;
                    return [points.iter().map(|p| p[0]).sum::<f64>() / k, points.iter().map(|p| p[1]).sum::<f64>() / k];
                }
                [cx / (3.0 * a), cy / (3.0 * a)]
            }
        }
    }

    /// Distance from the centroid to the boundary along the ray through `p`.
    fn boundary_distance(&self, c: [f64; 2], dir: [f64; 2]) -> f64 {
        match self {
            WidgetShape::Rect { u0, v0, u1, v1 } => {
                let mut t = f64::INFINITY;
                for (d, lo, hi, o) in [(dir[0], u0, u1, c[0]), (dir[1], v0, v1, c[1])] {
                    if d > 0.0 {
                        t = t.min((hi - o) / d);
                    } else if d < 0.0 {
                        t = t.min((lo - o) / d);
                    }
                }
                t
            }
            WidgetShape::Lasso { points } => {
                let n = points.len();
                let mut best = f64::INFINITY;
                for i in 0..n {
                    let (a, b) = (points[i], points[(i + 1) % n]);
                    let e = [b[0] - a[0], b[1] - a[1]];
                    let den = dir[0] * e[1] - dir[1] * e[0];
                    if den.abs() < 1e-15 {
                        continue;
                    }
                    let w = [a[0] - c[0], a[1] - c[1]];
                    let t = (w[0] * e[1] - w[1] * e[0]) / den;
                    let s = (w[0] * dir[1] - w[1] * dir[0]) / den;
                    if t > 0.0 && (0.0..=1.0).contains(&s) {
                        best = best.min(t);
                    }
                }
                best
            }
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    if e1 <= e0 {
        return if x >= e1 { 1.0 } else { 0.0 };
    }
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrushWidget {
    pub shape: WidgetShape,
    /// Subspace id, or −1 for every subspace.
    #[serde(default = "any_subspace")]
    pub sid: i64,
    #[serde(default)]
    pub tid: u32,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Fraction of the centroid-to-boundary distance over which opacity
    /// fades to zero; 0 disables the fade.
    #[serde(default)]
    pub falloff: f64,
}

fn any_subspace() -> i64 {
    -1
}

impl BrushWidget {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(0.0..=1.0).contains(&self.opacity) || !(0.0..=1.0).contains(&self.falloff) {
            return Err(Error::InvalidParam("opacity and falloff must lie in [0, 1]".into()));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParam("color channels must lie in [0, 1]".into()));
        }
        if self.sid < -1 {
            return Err(Error::InvalidParam(format!("invalid sID {}", self.sid)));
        }
        Ok(())
    }

    /// Opacity factor for a matching point: 1 at the centroid, fading to 0
    /// at the boundary over the outer `falloff` fraction of the ray.
    pub fn falloff_factor(&self, p: [f64; 2]) -> f64 {
        let c = self.shape.centroid();
        let d = [p[0] - c[0], p[1] - c[1]];
        let len = d[0].hypot(d[1]);
        if len == 0.0 || self.falloff == 0.0 {
            return 1.0;
        }
        let reach = self.shape.boundary_distance(c, [d[0] / len, d[1] / len]);
        if !reach.is_finite() || reach <= 0.0 {
            return 1.0;
        }
        1.0 - smoothstep(1.0 - self.falloff, 1.0, len / reach)
    }

    /// Opacity contributed to `eta`, `None` if the widget does not match.
    pub fn evaluate(&self, eta: &IndexedPoint) -> Option<f64> {
        if self.sid != -1 && self.sid != eta.subspace as i64 {
            return None;
        }
        let p = [eta.u, eta.v];
        self.shape.contains(p).then(|| self.opacity * self.falloff_factor(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBrush {
    pub attr: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferFunctionSet {
    #[serde(default)]
    pub widgets: Vec<BrushWidget>,
    #[serde(default)]
    pub axis_brushes: Vec<AxisBrush>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rgba {
    pub color: [f64; 3],
    pub alpha: f64,
}

impl Rgba {
    pub const TRANSPARENT: Rgba = Rgba { color: [0.0; 3], alpha: 0.0 };
}

impl TransferFunctionSet {
    pub fn validate(&self) -> Result<()> {
        self.widgets.iter().try_for_each(|w| w.validate())?;
        for b in &self.axis_brushes {
            if !(b.lo <= b.hi) {
                return Err(Error::InvalidParam(format!("axis brush on attribute {} has lo > hi", b.attr)));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: TransferFunctionSet = serde_json::from_str(s).map_err(|e| Error::InvalidParam(format!("transfer function: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    /// tID groups in order of first appearance, as widget indices.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<u32> = Vec::new();
        let mut by_tid: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, w) in self.widgets.iter().enumerate() {
            if !by_tid.contains_key(&w.tid) {
                order.push(w.tid);
            }
            by_tid.entry(w.tid).or_default().push(i);
        }
        order.into_iter().map(|t| by_tid.remove(&t).unwrap()).collect()
    }
}

/// Color and opacity of one indexed point.
///
/// Widgets sharing a tID must all match (AND); the group takes the first
/// member's color and the smallest member opacity. Groups combine by OR:
/// the most opaque wins, earlier groups on ties.
pub fn eval_tf(eta: &IndexedPoint, tfs: &TransferFunctionSet) -> Rgba {
    eval_groups(eta, tfs, &tfs.groups()).0
}

// Also returns the index of the winning group's first widget.
fn eval_groups(eta: &IndexedPoint, tfs: &TransferFunctionSet, groups: &[Vec<usize>]) -> (Rgba, Option<usize>) {
    let mut best = Rgba::TRANSPARENT;
    let mut head = None;
    'groups: for g in groups {
        let mut alpha = f64::INFINITY;
        for &i in g {
            match tfs.widgets[i].evaluate(eta) {
                Some(a) => alpha = alpha.min(a),
                None => continue 'groups,
            }
        }
        if head.is_none() || alpha > best.alpha {
            best = Rgba {
                color: tfs.widgets[g[0]].color,
                alpha,
            };
            head = Some(g[0]);
        }
    }
    (best, head)
}

/// Closed-interval test of every axis brush; vacuously true.
pub fn eval_axis_brushes(xi: &[f64], tfs: &TransferFunctionSet) -> bool {
    tfs.axis_brushes.iter().all(|b| xi.get(b.attr).is_some_and(|&x| x >= b.lo && x <= b.hi))
}

/// Per-voxel premultiplied color and extinction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorOpacityVolume {
    pub grid: Grid,
    pub rgba: Vec<[f32; 4]>,
    pub extinction: Vec<f32>,
}

impl ColorOpacityVolume {
    pub fn transparent(grid: Grid) -> Self {
        ColorOpacityVolume {
            grid,
            rgba: vec![[0.0; 4]; grid.len()],
            extinction: vec![0.0; grid.len()],
        }
    }

    pub fn from_rgba(grid: Grid, rgba: Vec<[f32; 4]>) -> Self {
        let extinction = rgba.iter().map(|c| alpha_to_extinction(c[3] as f64) as f32).collect();
        ColorOpacityVolume { grid, rgba, extinction }
    }

    pub fn alpha(&self, v: usize) -> f32 {
        self.rgba[v][3]
    }

    pub fn selected(&self) -> Vec<bool> {
        self.rgba.iter().map(|c| c[3] > 0.0).collect()
    }
}

pub fn alpha_to_extinction(alpha: f64) -> f64 {
    -(1.0 - alpha.clamp(0.0, MAX_ALPHA)).ln()
}

/// Most opaque transfer-function result over all subspaces of each voxel,
/// gated by the axis brushes applied to the voxel's data value.
pub fn classify_volume(ipv: &IndexedPointVolume, fv: &FitVolume, tfs: &TransferFunctionSet) -> Result<ColorOpacityVolume> {
    tfs.validate()?;
    if ipv.grid != fv.grid {
        return Err(Error::InvalidParam("indexed points and fits differ in grid".into()));
    }
    let rgba = classify_voxels(ipv, fv, tfs)
        .into_iter()
        .map(|(c, _)| {
            let a = c.alpha as f32;
            [c.color[0] as f32 * a, c.color[1] as f32 * a, c.color[2] as f32 * a, a]
        })
        .collect();
    Ok(ColorOpacityVolume::from_rgba(ipv.grid, rgba))
}

/// Per voxel: the most opaque result over subspaces (earlier subspace on
/// ties) and the first widget of the group that produced it.
pub fn classify_voxels(ipv: &IndexedPointVolume, fv: &FitVolume, tfs: &TransferFunctionSet) -> Vec<(Rgba, Option<usize>)> {
    let groups = tfs.groups();
    (0..ipv.voxel_count())
        .into_par_iter()
        .map(|v| {
            let mut best = (Rgba::TRANSPARENT, None);
            if tfs.widgets.is_empty() || !eval_axis_brushes(fv.xi(v), tfs) {
                return best;
            }
            for s in 0..ipv.subspaces {
                if let Some(eta) = ipv.get(v, s) {
                    let c = eval_groups(&eta, tfs, &groups);
                    if c.1.is_some() && (best.1.is_none() || c.0.alpha > best.0.alpha) {
                        best = c;
                    }
                }
            }
            best
        })
        .collect()
}

/// Region selected in one of the linked layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LinkRegion {
    /// Box over data values, one interval per attribute.
    Polyline { lo: Vec<f64>, hi: Vec<f64> },
    /// Shape in the indexed-point plane of one subspace, or all with −1.
    IndexedPoints { sid: i64, shape: WidgetShape },
    /// Shape in the scatterplot of an attribute pair.
    Splom { attrs: [usize; 2], shape: WidgetShape },
}

/// kd-trees over a downsampled voxel set for every linked layer.
pub struct LinkIndex {
    pub stride: usize,
    pub axis_order: Vec<usize>,
    /// Voxel ids of the downsampled set.
    pub ids: Vec<usize>,
    m: usize,
    polyline: KdTree,
    /// Per subspace: tree over (u, v) and the voxel ids of its entries.
    indexed: Vec<(KdTree, Vec<usize>)>,
    values: Vec<Vec<f64>>,
}

pub const DEFAULT_LINK_STRIDE: usize = 8;

impl LinkIndex {
    pub fn build(vol: &MultivariateVolume, ipv: &IndexedPointVolume, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidParam("link stride must be >= 1".into()));
        }
        let g = vol.grid();
        let d = g.dims;
        let mut ids = Vec::new();
        for z in (0..d[2]).step_by(stride) {
            for y in (0..d[1]).step_by(stride) {
                for x in (0..d[0]).step_by(stride) {
                    ids.push(g.index(x, y, z));
                }
            }
        }
        let values: Vec<Vec<f64>> = ids.iter().map(|&v| vol.data_value(v)).collect();
        let m = vol.attr_count();
        let indexed = (0..ipv.subspaces)
            .map(|s| {
                let (pts, who): (Vec<[f64; 2]>, Vec<usize>) = ids.iter().filter_map(|&v| ipv.get(v, s).map(|p| ([p.u, p.v], v))).unzip();
                (KdTree::build(2, &pts), who)
            })
            .collect();
        Ok(LinkIndex {
            stride,
            axis_order: ipv.axis_order.clone(),
            polyline: KdTree::build(m, &values),
            ids,
            m,
            indexed,
            values,
        })
    }

    /// Data values of the downsampled voxels, parallel to `ids`.
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// True when the indexed points were rebuilt for another axis order.
    pub fn is_stale(&self, ipv: &IndexedPointVolume) -> bool {
        self.axis_order != ipv.axis_order
    }

    /// Sorted voxel ids whose representation in the region's layer lies
    /// inside the region.
    pub fn query(&self, region: &LinkRegion) -> Result<Vec<usize>> {
        let mut out = match region {
            LinkRegion::Polyline { lo, hi } => {
                if lo.len() != self.m || hi.len() != self.m {
                    return Err(Error::InvalidParam(format!("polyline region needs {} intervals", self.m)));
                }
                self.polyline.within_box(lo, hi).into_iter().map(|i| self.ids[i]).collect()
            }
            LinkRegion::IndexedPoints { sid, shape } => {
                shape.validate()?;
                let (lo, hi) = shape.bounds();
                let mut out = Vec::new();
                for (s, (tree, who)) in self.indexed.iter().enumerate() {
                    if *sid == -1 || *sid == s as i64 {
                        out.extend(tree.query_region(&lo, &hi, |p| shape.contains([p[0], p[1]])).into_iter().map(|i| who[i]));
                    }
                }
                out
            }
            LinkRegion::Splom { attrs, shape } => {
                shape.validate()?;
                if attrs.iter().any(|&a| a >= self.m) {
                    return Err(Error::InvalidParam("scatterplot attribute out of range".into()));
                }
                let pts: Vec<[f64; 2]> = self.values.iter().map(|v| [v[attrs[0]], v[attrs[1]]]).collect();
                let (lo, hi) = shape.bounds();
                KdTree::build(2, &pts)
                    .query_region(&lo, &hi, |p| shape.contains([p[0], p[1]]))
                    .into_iter()
                    .map(|i| self.ids[i])
                    .collect::<Vec<_>>()
            }
        };
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eta(u: f64, v: f64, subspace: usize) -> IndexedPoint {
        IndexedPoint { u, v, subspace, flat_order: 1 }
    }

    fn rect(u0: f64, v0: f64, u1: f64, v1: f64, sid: i64, tid: u32, opacity: f64) -> BrushWidget {
        BrushWidget {
            shape: WidgetShape::Rect { u0, v0, u1, v1 },
            sid,
            tid,
            color: [1.0, 0.0, 0.0],
            opacity,
            falloff: 0.0,
        }
    }

    #[test]
    fn any_subspace_widget_matches_everywhere() {
        let t = TransferFunctionSet {
            widgets: vec![rect(0.0, 0.0, 1.0, 1.0, -1, 0, 0.8)],
            ..Default::default()
        };
        for s in 0..4 {
            assert_eq!(eval_tf(&eta(0.5, 0.5, s), &t).alpha, 0.8);
        }
    }

    #[test]
    fn sid_restricts_match() {
        let t = TransferFunctionSet {
            widgets: vec![rect(0.0, 0.0, 1.0, 1.0, 2, 0, 0.8)],
            ..Default::default()
        };
        assert_eq!(eval_tf(&eta(0.5, 0.5, 2), &t).alpha, 0.8);
        assert_eq!(eval_tf(&eta(0.5, 0.5, 1), &t), Rgba::TRANSPARENT);
    }

    #[test]
    fn same_tid_requires_all() {
        let t = TransferFunctionSet {
            widgets: vec![rect(0.0, 0.0, 1.0, 1.0, -1, 4, 0.8), rect(0.5, 0.0, 2.0, 1.0, -1, 4, 0.6)],
            ..Default::default()
        };
        assert_eq!(eval_tf(&eta(0.2, 0.5, 0), &t), Rgba::TRANSPARENT);
        let both = eval_tf(&eta(0.7, 0.5, 0), &t);
        assert_eq!(both.alpha, 0.6);
        assert_eq!(both.color, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn groups_or_by_max_then_order() {
        let mut a = rect(0.0, 0.0, 1.0, 1.0, -1, 0, 0.5);
        let mut b = rect(0.0, 0.0, 1.0, 1.0, -1, 1, 0.5);
        a.color = [0.0, 1.0, 0.0];
        b.color = [0.0, 0.0, 1.0];
        let t = TransferFunctionSet {
            widgets: vec![a.clone(), b.clone()],
            ..Default::default()
        };
        assert_eq!(eval_tf(&eta(0.5, 0.5, 0), &t).color, [0.0, 1.0, 0.0]);
        b.opacity = 0.9;
        let t = TransferFunctionSet {
            widgets: vec![a, b],
            ..Default::default()
        };
        assert_eq!(eval_tf(&eta(0.5, 0.5, 0), &t).color, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn falloff_full_at_centroid_zero_at_edge() {
        let mut w = rect(0.0, 0.0, 2.0, 1.0, -1, 0, 0.8);
        w.falloff = 0.5;
        assert_eq!(w.evaluate(&eta(1.0, 0.5, 0)), Some(0.8));
        assert!(w.evaluate(&eta(2.0, 0.5, 0)).unwrap().abs() < 1e-12);
        // inside the plateau
        assert_eq!(w.evaluate(&eta(1.4, 0.5, 0)), Some(0.8));
        let mid = w.evaluate(&eta(1.75, 0.5, 0)).unwrap();
        assert!((mid - 0.4).abs() < 1e-12);
    }

    #[test]
    fn lasso_falloff_along_centroid_ray() {
        let w = BrushWidget {
            shape: WidgetShape::Lasso {
                points: vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]],
            },
            sid: -1,
            tid: 0,
            color: [1.0; 3],
            opacity: 1.0,
            falloff: 1.0,
        };
        assert_eq!(w.shape.centroid(), [1.0, 1.0]);
        assert_eq!(w.falloff_factor([1.0, 1.0]), 1.0);
        assert!((w.falloff_factor([1.5, 1.5]) - 0.5).abs() < 1e-12);
        assert!(w.falloff_factor([1.999, 1.0]) < 1e-3);
    }

    #[test]
    fn axis_brushes_closed() {
        let mut t = TransferFunctionSet::default();
        assert!(eval_axis_brushes(&[0.3, 0.9], &t));
        t.axis_brushes.push(AxisBrush { attr: 1, lo: 0.2, hi: 0.9 });
        assert!(eval_axis_brushes(&[0.3, 0.9], &t));
        assert!(!eval_axis_brushes(&[0.3, 0.95], &t));
    }

    #[test]
    fn validation() {
        let bow = BrushWidget {
            shape: WidgetShape::Lasso {
                points: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
            },
            ..rect(0.0, 0.0, 1.0, 1.0, -1, 0, 1.0)
        };
        assert!(bow.validate().is_err());
        assert!(rect(1.0, 0.0, 0.0, 1.0, -1, 0, 1.0).validate().is_err());
        assert!(rect(0.0, 0.0, 1.0, 1.0, -1, 0, 1.5).validate().is_err());
        assert!(TransferFunctionSet::from_json("{\"widgets\": [{\"shape\": {\"kind\": \"rect\", \"u0\": 0, \"v0\": 0, \"u1\": 1, \"v1\": 1}, \"color\": [1, 0, 0], \"opacity\": 0.5}]}").is_ok());
        assert!(TransferFunctionSet::from_json("{\"widgets\": 3}").is_err());
    }

    #[test]
    fn extinction_of_opacity() {
        assert_eq!(alpha_to_extinction(0.0), 0.0);
        assert!((alpha_to_extinction(0.5) - 2f64.ln()).abs() < 1e-12);
        assert!((alpha_to_extinction(1.0) - 1000f64.ln()).abs() < 1e-9);
    }

    fn widget_strategy() -> impl Strategy<Value = BrushWidget> {
        (0.0f64..2.0, 0.0f64..1.0, 0.1f64..1.0, 0.1f64..0.8, -1i64..3, 0u32..3, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(u, v, w, h, sid, tid, op, f)| BrushWidget {
            shape: WidgetShape::Rect { u0: u, v0: v, u1: u + w, v1: v + h },
            sid,
            tid,
            color: [op, 1.0 - op, 0.5],
            opacity: op,
            falloff: f,
        })
    }

    proptest! {
        #[test]
        fn or_and_monotone(
            widgets in prop::collection::vec(widget_strategy(), 1..5),
            extra in widget_strategy(),
            pts in prop::collection::vec((0.0f64..3.0, 0.0f64..1.5, 0usize..3), 50),
        ) {
            let base = TransferFunctionSet { widgets: widgets.clone(), ..Default::default() };
            let fresh_tid = widgets.iter().map(|w| w.tid).max().unwrap() + 1;
            let mut or = base.clone();
            or.widgets.push(BrushWidget { tid: fresh_tid, ..extra.clone() });
            let mut and = base.clone();
            and.widgets.push(BrushWidget { tid: widgets[0].tid, ..extra });
            let group_sel = |t: &TransferFunctionSet, e: &IndexedPoint| -> bool {
                let g: Vec<usize> = t.widgets.iter().enumerate().filter(|(_, w)| w.tid == widgets[0].tid).map(|(i, _)| i).collect();
                g.iter().all(|&i| t.widgets[i].evaluate(e).is_some())
            };
            for (u, v, s) in pts {
                let e = eta(u, v, s);
                let a = eval_tf(&e, &base);
                prop_assert_eq!(a, eval_tf(&e, &base));
                if a.alpha > 0.0 {
                    prop_assert!(eval_tf(&e, &or).alpha >= a.alpha);
                }
                prop_assert!(!group_sel(&and, &e) || group_sel(&base, &e));
                for w in &base.widgets {
                    if w.sid >= 0 && w.sid != s as i64 {
                        prop_assert!(w.evaluate(&e).is_none());
                    }
                }
            }
        }
    }
}
