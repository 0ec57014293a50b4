//! Octree over the filtered saliency field. Nodes split while their
//! saliency range exceeds `t_s`; leaf variance against `t_e` decides how the
//! fitting stage treats the leaf.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctreeParams {
    /// Subdivision threshold on the saliency range of a node.
    pub t_s: f64,
    /// Leaves with saliency variance below this share one fit.
    pub t_e: f64,
    /// Nodes whose largest extent is at most this are not split further.
    pub min_node: usize,
}

impl Default for OctreeParams {
    fn default() -> Self {
        OctreeParams {
            t_s: 0.03,
            t_e: 0.01,
            min_node: 4,
        }
    }
}

impl OctreeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_e >= 0.0) || !(self.t_s >= 0.0) {
            return Err(Error::InvalidParam("thresholds must be non-negative".into()));
        }
        if self.t_e > self.t_s {
            return Err(Error::InvalidParam(format!("t_e ({}) must not exceed t_s ({})", self.t_e, self.t_s)));
        }
        if self.min_node < 2 {
            return Err(Error::InvalidParam(format!("min_node must be >= 2, got {}", self.min_node)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LeafStrategy {
    /// One fit at the leaf center, replicated.
    Homogeneous,
    /// Fits at the leaf corners, eigenframes interpolated per voxel.
    Interpolate,
    /// A fresh fit for every voxel.
    PerVoxel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctreeNode {
    /// Inclusive lower voxel corner.
    pub min: [usize; 3],
    /// Exclusive upper voxel corner.
    pub max: [usize; 3],
    /// Index of the first of 8 consecutive children.
    pub first_child: Option<u32>,
    pub range: f64,
    pub variance: f64,
    pub strategy: Option<LeafStrategy>,
}

impl OctreeNode {
    pub fn extent(&self) -> [usize; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn is_leaf(&self) -> bool {
        self.first_child.is_none()
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.min[a] && c[a] < self.max[a])
    }

    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let (lo, hi) = (self.min, self.max);
        (lo[2]..hi[2]).flat_map(move |z| (lo[1]..hi[1]).flat_map(move |y| (lo[0]..hi[0]).map(move |x| [x, y, z])))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Octree {
    pub grid: Grid,
    pub params: OctreeParams,
    pub nodes: Vec<OctreeNode>,
}

fn node_stats(grid: Grid, field: &[f64], min: [usize; 3], max: [usize; 3]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut n = 0usize;
    for z in min[2]..max[2] {
        for y in min[1]..max[1] {
            let row = grid.index(min[0], y, z);
            for &v in &field[row..row + (max[0] - min[0])] {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
                sum2 += v * v;
                n += 1;
            }
        }
    }
    let mean = sum / n as f64;
    ((hi - lo).max(0.0), (sum2 / n as f64 - mean * mean).max(0.0))
}

/// Build the octree over a filtered saliency field.
pub fn build_octree(grid: Grid, filtered: &[f64], params: OctreeParams) -> Result<Octree> {
    params.validate()?;
    assert_eq!(filtered.len(), grid.len(), "saliency field does not match grid");
    let (range, variance) = node_stats(grid, filtered, [0; 3], grid.dims);
    let mut nodes = vec![OctreeNode {
        min: [0; 3],
        max: grid.dims,
        first_child: None,
        range,
        variance,
        strategy: None,
    }];
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        let node = nodes[i].clone();
        let ext = node.extent();
        let splittable = ext.iter().all(|&e| e >= 2) && ext.iter().any(|&e| e > params.min_node);
        if node.range > params.t_s && splittable {
            let mid = [
                node.min[0] + ext[0] / 2,
                node.min[1] + ext[1] / 2,
                node.min[2] + ext[2] / 2,
            ];
            let first = nodes.len();
            for c in 0..8 {
                let mut lo = [0; 3];
                let mut hi = [0; 3];
                for a in 0..3 {
                    if (c >> a) & 1 == 0 {
                        lo[a] = node.min[a];
                        hi[a] = mid[a];
                    } else {
                        lo[a] = mid[a];
                        hi[a] = node.max[a];
                    }
                }
                let (range, variance) = node_stats(grid, filtered, lo, hi);
                nodes.push(OctreeNode {
                    min: lo,
                    max: hi,
                    first_child: None,
                    range,
                    variance,
                    strategy: None,
                });
                stack.push(first + c);
            }
            nodes[i].first_child = Some(first as u32);
        } else {
            nodes[i].strategy = Some(if node.range > params.t_s {
                LeafStrategy::PerVoxel
            } else if node.variance < params.t_e {
                LeafStrategy::Homogeneous
            } else {
                LeafStrategy::Interpolate
            });
        }
    }
    Ok(Octree { grid, params, nodes })
}

impl Octree {
    pub fn leaves(&self) -> impl Iterator<Item = &OctreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }

    /// Leaf containing a voxel, found by descending from the root.
    pub fn leaf_at(&self, c: [usize; 3]) -> Option<&OctreeNode> {
        let mut node = &self.nodes[0];
        if !node.contains(c) {
            return None;
        }
        while let Some(first) = node.first_child {
            node = self.nodes[first as usize..first as usize + 8].iter().find(|n| n.contains(c))?;
        }
        Some(node)
    }

    /// Fresh-PCA work proxy: every PerVoxel voxel plus one fit per other leaf.
    pub fn fresh_fit_proxy(&self) -> usize {
        self.leaves()
            .map(|l| match l.strategy {
                Some(LeafStrategy::PerVoxel) => l.voxel_count(),
                _ => 1,
            })
            .sum()
    }
}
