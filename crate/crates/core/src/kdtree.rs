//! Balanced K-dimensional tree stored implicitly in a permuted point array.
//! Used for the KDE disk queries and for brushing-and-linking.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KdTree {
    k: usize,
    // coordinates reordered so the median of every subrange [lo, hi) sits at
    // (lo + hi) / 2, with the original index and split axis alongside
    coords: Vec<f64>,
    ids: Vec<u32>,
    axes: Vec<u8>,
}

impl KdTree {
    /// Build over points of dimension `k`; query results report indices
    /// into `points`.
    pub fn build<P: AsRef<[f64]>>(k: usize, points: &[P]) -> Self {
        assert!((1..256).contains(&k) && points.len() < u32::MAX as usize);
        assert!(points.iter().all(|p| p.as_ref().len() == k), "point dimension differs from k");
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build_range(k, points, &mut order, &mut axes);
        KdTree {
            k,
            coords: order.iter().flat_map(|&i| points[i as usize].as_ref().iter().copied()).collect(),
            ids: order,
            axes,
        }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn at(&self, slot: usize) -> &[f64] {
        &self.coords[slot * self.k..(slot + 1) * self.k]
    }

    pub fn point(&self, id: usize) -> Option<&[f64]> {
        self.ids.iter().position(|&i| i as usize == id).map(|p| self.at(p))
    }

    /// Indices of points within distance `r` of `center`.
    pub fn within_radius(&self, center: &[f64], r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within_radius(center, r, |id, _| out.push(id));
        out
    }

    /// Visit `(index, squared distance)` for every point within `r`.
    pub fn for_each_within_radius(&self, center: &[f64], r: f64, mut f: impl FnMut(usize, f64)) {
        assert_eq!(center.len(), self.k);
        let r2 = r * r;
        self.walk(
            &|axis, split| {
                let d = center[axis] - split;
                (d <= r, d >= -r)
            },
            &mut |p, id| {
                let d2 = dist2(p, center);
                if d2 <= r2 {
                    f(id, d2);
                }
            },
        );
    }

    /// Indices of points inside the closed box `[lo, hi]`.
    pub fn within_box(&self, lo: &[f64], hi: &[f64]) -> Vec<usize> {
        self.query_region(lo, hi, |_| true)
    }

    /// Points inside the closed box that also satisfy `pred`; the box prunes
    /// the traversal, `pred` refines (for polygons and other regions).
    pub fn query_region(&self, lo: &[f64], hi: &[f64], pred: impl Fn(&[f64]) -> bool) -> Vec<usize> {
        assert!(lo.len() == self.k && hi.len() == self.k);
        let mut out = Vec::new();
        self.walk(
            &|axis, split| (lo[axis] <= split, hi[axis] >= split),
            &mut |p, id| {
                if (0..self.k).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) && pred(p) {
                    out.push(id);
                }
            },
        );
        out
    }

    // `descend(axis, split)` says whether the left / right halves may hold
    // matches; `visit` sees every candidate median.
    fn walk(&self, descend: &dyn Fn(usize, f64) -> (bool, bool), visit: &mut dyn FnMut(&[f64], usize)) {
        let mut stack = vec![(0usize, self.ids.len())];
        while let Some((lo, hi)) = stack.pop() {
            if lo >= hi {
                continue;
            }
            let mid = (lo + hi) / 2;
            let axis = self.axes[mid] as usize;
            let p = self.at(mid);
            visit(p, self.ids[mid] as usize);
            let (left, right) = descend(axis, p[axis]);
            if left {
                stack.push((lo, mid));
            }
            if right {
                stack.push((mid + 1, hi));
            }
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn build_range<P: AsRef<[f64]>>(k: usize, points: &[P], order: &mut [u32], axes: &mut [u8]) {
    if order.is_empty() {
        return;
    }
    // split along the axis of largest spread
    let mut best = 0;
    let mut best_spread = f64::NEG_INFINITY;
    for a in 0..k {
        let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = points[i as usize].as_ref()[a];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best_spread {
            best_spread = hi - lo;
            best = a;
        }
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a as usize].as_ref()[best].total_cmp(&points[b as usize].as_ref()[best]));
    axes[mid] = best as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (laxes, raxes) = axes.split_at_mut(mid);
    build_range(k, points, left, laxes);
    build_range(k, points, &mut rest[1..], &mut raxes[1..]);
}

/// Point-in-polygon by crossing number; boundary points may go either way.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_radius<const K: usize>(pts: &[[f64; K]], c: [f64; K], r: f64) -> Vec<usize> {
        (0..pts.len()).filter(|&i| dist2(&pts[i], &c) <= r * r).collect()
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn three_points_all_returned() {
        let t = KdTree::build(2, &[[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]]);
        assert_eq!(t.len(), 3);
        assert_eq!(sorted(t.within_radius(&[1.0, 1.0], 10.0)), vec![0, 1, 2]);
    }

    #[test]
    fn empty_tree_returns_nothing() {
        let t = KdTree::build::<[f64; 2]>(2, &[]);
        assert!(t.is_empty());
        assert!(t.within_radius(&[0.0, 0.0], 100.0).is_empty());
        assert!(t.within_box(&[-1e9; 2], &[1e9; 2]).is_empty());
    }

    #[test]
    fn disk_queries_match_brute_force_on_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<[f64; 2]> = (0..1000)
            .map(|_| [rng.random_range(0..100) as f64, rng.random_range(0..60) as f64])
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        let t = KdTree::build(2, &pts);
        for _ in 0..300 {
            let c = [rng.random_range(-5.0..105.0), rng.random_range(-5.0..65.0)];
            let r = rng.random_range(0.0..15.0);
            assert_eq!(sorted(t.within_radius(&c, r)), brute_radius(&pts, c, r));
        }
    }

    #[test]
    fn duplicate_coordinates_handled() {
        let pts = vec![[1.0, 1.0]; 50];
        let t = KdTree::build(2, &pts);
        assert_eq!(t.within_radius(&[1.0, 1.0], 0.0).len(), 50);
        assert_eq!(t.within_box(&[1.0, 1.0], &[1.0, 1.0]).len(), 50);
    }

    #[test]
    fn polygon_membership() {
        let sq = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        assert!(point_in_polygon([1.0, 1.0], &sq));
        assert!(!point_in_polygon([3.0, 1.0], &sq));
        let l = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
        assert!(!point_in_polygon([1.5, 1.5], &l));
        assert!(point_in_polygon([0.5, 1.5], &l));
    }

    #[test]
    fn serde_roundtrip() {
        let pts = [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]];
        let t = KdTree::build(3, &pts);
        let bytes = bincode::serialize(&t).unwrap();
        let u: KdTree = bincode::deserialize(&bytes).unwrap();
        assert_eq!(sorted(u.within_radius(&[0.0; 3], 100.0)), vec![0, 1]);
        assert_eq!(u.point(1), Some(&[3.0, 4.0, 5.0][..]));
    }

    proptest! {
        #[test]
        fn box_and_region_match_brute_force(
            pts in prop::collection::vec(prop::array::uniform4(-10.0f64..10.0), 0..400),
            lo in prop::array::uniform4(-12.0f64..8.0),
            ext in prop::array::uniform4(0.0f64..12.0),
        ) {
            let t = KdTree::build(4, &pts);
            let hi = [lo[0] + ext[0], lo[1] + ext[1], lo[2] + ext[2], lo[3] + ext[3]];
            let inside = |p: &[f64; 4]| (0..4).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
            let want: Vec<usize> = (0..pts.len()).filter(|&i| inside(&pts[i])).collect();
            prop_assert_eq!(sorted(t.within_box(&lo, &hi)), want.clone());
            let pred = |p: &[f64]| p[0] + p[1] > 0.0;
            let want2: Vec<usize> = want.into_iter().filter(|&i| pred(&pts[i])).collect();
            prop_assert_eq!(sorted(t.query_region(&lo, &hi, pred)), want2);
        }

        #[test]
        fn radius_matches_brute_force_3d(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 0..300),
            c in prop::array::uniform3(-6.0f64..6.0),
            r in 0.0f64..6.0,
        ) {
            let t = KdTree::build(3, &pts);
            prop_assert_eq!(sorted(t.within_radius(&c, r)), brute_radius(&pts, c, r));
        }
    }
}
