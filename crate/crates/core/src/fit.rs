//! Local linear fitting: Monte-Carlo PCA over spatial neighborhoods, sign
//! alignment, sine-weighted eigenframe interpolation, and the per-voxel
//! fit volume. A data-domain variant (neighborhoods in attribute space)
//! exists for comparison.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octree::{LeafStrategy, Octree};
use crate::volume::{Grid, MultivariateVolume};

pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub halfwidth: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            halfwidth: 3,
            n_samples: 100,
            seed: 0,
        }
    }
}

impl FitParams {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.halfwidth < 1 {
            return Err(Error::InvalidParam("halfwidth must be >= 1".into()));
        }
        if self.n_samples < m + 1 {
            return Err(Error::TooFewSamples {
                needed: m + 1,
                got: self.n_samples,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalFit {
    pub xi: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    pub valid2flat: bool,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the neighborhood centered at `x`. Depends only on (seed, x), so
/// fits are independent of evaluation order.
pub fn position_rng(seed: u64, x: [f64; 3]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for c in x {
        h = splitmix64(h ^ c.to_bits());
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Uniform Monte-Carlo samples of all attributes in the window
/// `[x - h, x + h]³` clipped to the volume.
pub fn sample_neighborhood(vol: &MultivariateVolume, x: [f64; 3], halfwidth: usize, n_samples: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = vol.dims();
    let h = halfwidth as f64;
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        let top = (d[a] - 1) as f64;
        lo[a] = (x[a] - h).clamp(0.0, top);
        hi[a] = (x[a] + h).clamp(0.0, top);
    }
    (0..n_samples)
        .map(|_| {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = if hi[a] > lo[a] { rng.random_range(lo[a]..=hi[a]) } else { lo[a] };
            }
            let mut t = vec![0.0; vol.attr_count()];
            vol.sample_all(p, &mut t);
            t
        })
        .collect()
}

/// PCA of the sample covariance; `xi` is the sample mean.
pub fn local_pca(samples: &[Vec<f64>]) -> Result<LocalFit> {
    let m = samples.first().map_or(0, |s| s.len());
    if samples.len() < m + 1 || m == 0 {
        return Err(Error::TooFewSamples {
            needed: m + 1,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; m];
    for s in samples {
        for (acc, v) in mean.iter_mut().zip(s) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut cov = DMatrix::<f64>::zeros(m, m);
    for s in samples {
        for i in 0..m {
            let di = s[i] - mean[i];
            for j in i..m {
                cov[(i, j)] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(pca_from_covariance(mean, cov))
}

fn pca_from_covariance(xi: Vec<f64>, cov: DMatrix<f64>) -> LocalFit {
    let m = xi.len();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let column = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        canonical_sign(&mut v);
        v
    };
    let l1 = eigenvalues[0];
    if l1 < EIGEN_FLOOR {
        return LocalFit {
            xi,
            e1: unit(m, 0),
            e2: unit(m, 1.min(m - 1)),
            eigenvalues: vec![0.0; m],
            valid2flat: false,
        };
    }
    let l2 = eigenvalues.get(1).copied().unwrap_or(0.0);
    let e1 = column(0);
    let e2 = if m > 1 { column(1) } else { vec![0.0] };
    LocalFit {
        xi,
        e1,
        e2,
        valid2flat: m > 1 && l2 > EIGEN_FLOOR && l2 >= EIGEN_FLOOR * l1,
        eigenvalues,
    }
}

fn unit(m: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[k] = 1.0;
    v
}

// largest-magnitude component positive
fn canonical_sign(v: &mut [f64]) {
    let k = (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flip e1 / e2 so they point into the same half-space as the reference.
pub fn align_signs(fit: &LocalFit, reference: &LocalFit) -> LocalFit {
    let mut out = fit.clone();
    if dot(&out.e1, &reference.e1) < 0.0 {
        out.e1.iter_mut().for_each(|x| *x = -*x);
    }
    if dot(&out.e2, &reference.e2) < 0.0 {
        out.e2.iter_mut().for_each(|x| *x = -*x);
    }
    out
}

/// Trilinear weights of the 8 cell corners for fractional offsets `t`;
/// corner k sits at bit a of k along axis a.
pub fn trilinear_weights(t: [f64; 3]) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (k, wk) in w.iter_mut().enumerate() {
        *wk = (0..3).map(|a| if (k >> a) & 1 == 1 { t[a] } else { 1.0 - t[a] }).product();
    }
    w
}

/// Largest pairwise angle among the vectors.
pub fn max_pairwise_angle(vs: &[&[f64]]) -> f64 {
    let mut theta: f64 = 0.0;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            theta = theta.max(dot(vs[i], vs[j]).clamp(-1.0, 1.0).acos());
        }
    }
    theta
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendedFrame {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    /// An antipodal corner pair forced the nearest-corner fallback.
    pub fallback: bool,
}

fn blend_unit(vs: &[&[f64]], w: &[f64]) -> Option<Vec<f64>> {
    let m = vs[0].len();
    let theta = max_pairwise_angle(vs);
    if theta >= std::f64::consts::PI - 1e-6 {
        return None;
    }
    let mut out = vec![0.0; m];
    let coeff = |wk: f64| if theta < 1e-4 { wk } else { (wk * theta).sin() / theta.sin() };
    for (v, &wk) in vs.iter().zip(w) {
        let c = coeff(wk);
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += c * x;
        }
    }
    (normalize(&mut out) > 1e-12).then_some(out)
}

/// Sine-weighted spherical blend of sign-aligned corner frames, followed by
/// re-orthonormalization of e2 against e1.
pub fn interpolate_frame(corners: &[LocalFit], weights: &[f64]) -> BlendedFrame {
    assert_eq!(corners.len(), weights.len());
    let nearest = (0..weights.len()).max_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(b.cmp(&a))).unwrap();
    let e1s: Vec<&[f64]> = corners.iter().map(|c| c.e1.as_slice()).collect();
    let e2s: Vec<&[f64]> = corners.iter().map(|c| c.e2.as_slice()).collect();
    let (e1, e2, fallback) = match (blend_unit(&e1s, weights), blend_unit(&e2s, weights)) {
        (Some(a), Some(b)) => (a, b, false),
        _ => (corners[nearest].e1.clone(), corners[nearest].e2.clone(), true),
    };
    let e2 = orthogonalize(&e1, e2);
    BlendedFrame { e1, e2, fallback }
}

/// Unit vector orthogonal to unit `e1`, as close to `v` as possible.
fn orthogonalize(e1: &[f64], mut v: Vec<f64>) -> Vec<f64> {
    let m = e1.len();
    if m < 2 {
        return v;
    }
    let d = dot(e1, &v);
    v.iter_mut().zip(e1).for_each(|(x, e)| *x -= d * e);
    if normalize(&mut v) > 1e-9 {
        return v;
    }
    // v was parallel to e1: use the canonical axis least aligned with e1
    let k = (0..m).min_by(|&a, &b| e1[a].abs().total_cmp(&e1[b].abs())).unwrap();
    orthogonalize(e1, unit(m, k))
}

/// Per-voxel fits, stored as flat arrays of `m` values per voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitVolume {
    pub grid: Grid,
    pub m: usize,
    pub xi: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub valid2flat: Vec<bool>,
    pub stats: FitStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// PCA evaluations actually executed.
    pub pca_count: usize,
    /// PerVoxel voxels plus one per other leaf.
    pub fresh_fit_proxy: usize,
    pub fallback_count: usize,
}

impl FitVolume {
    fn with_grid(grid: Grid, m: usize) -> Self {
        let n = grid.len();
        FitVolume {
            grid,
            m,
            xi: vec![0.0; n * m],
            e1: vec![0.0; n * m],
            e2: vec![0.0; n * m],
            eigenvalues: vec![0.0; n * m],
            valid2flat: vec![false; n],
            stats: FitStats::default(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.grid.len()
    }

    pub fn xi(&self, v: usize) -> &[f64] {
        &self.xi[v * self.m..(v + 1) * self.m]
    }

    pub fn e1(&self, v: usize) -> &[f64] {
        &self.e1[v * self.m..(v + 1) * self.m]
    }

    pub fn e2(&self, v: usize) -> &[f64] {
        &self.e2[v * self.m..(v + 1) * self.m]
    }

    pub fn eigenvalues(&self, v: usize) -> &[f64] {
        &self.eigenvalues[v * self.m..(v + 1) * self.m]
    }

    pub fn fit(&self, v: usize) -> LocalFit {
        LocalFit {
            xi: self.xi(v).to_vec(),
            e1: self.e1(v).to_vec(),
            e2: self.e2(v).to_vec(),
            eigenvalues: self.eigenvalues(v).to_vec(),
            valid2flat: self.valid2flat[v],
        }
    }

    fn store(&mut self, v: usize, f: &LocalFit) {
        let r = v * self.m..(v + 1) * self.m;
        self.xi[r.clone()].copy_from_slice(&f.xi);
        self.e1[r.clone()].copy_from_slice(&f.e1);
        self.e2[r.clone()].copy_from_slice(&f.e2);
        self.eigenvalues[r].copy_from_slice(&f.eigenvalues);
        self.valid2flat[v] = f.valid2flat;
    }
}

fn voxel_pos(c: [usize; 3]) -> [f64; 3] {
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

fn fit_at(vol: &MultivariateVolume, x: [f64; 3], p: &FitParams) -> LocalFit {
    let mut rng = position_rng(p.seed, x);
    let samples = sample_neighborhood(vol, x, p.halfwidth, p.n_samples, &mut rng);
    local_pca(&samples).expect("sample count validated")
}

fn with_own_value(mut f: LocalFit, vol: &MultivariateVolume, voxel: usize) -> LocalFit {
    f.xi = vol.data_value(voxel);
    f
}

/// Fresh PCA at every voxel; the reference the octree path is measured
/// against.
pub fn fit_per_voxel(vol: &MultivariateVolume, params: &FitParams) -> Result<FitVolume> {
    params.validate(vol.attr_count())?;
    let grid = vol.grid();
    let fits: Vec<LocalFit> = (0..grid.len())
        .into_par_iter()
        .map(|v| with_own_value(fit_at(vol, voxel_pos(grid.coords(v)), params), vol, v))
        .collect();
    let mut out = FitVolume::with_grid(grid, vol.attr_count());
    for (v, f) in fits.iter().enumerate() {
        out.store(v, f);
    }
    out.stats.pca_count = grid.len();
    out.stats.fresh_fit_proxy = grid.len();
    Ok(out)
}

fn leaf_corners(min: [usize; 3], max: [usize; 3]) -> [[usize; 3]; 8] {
    let mut out = [[0; 3]; 8];
    for (k, c) in out.iter_mut().enumerate() {
        for a in 0..3 {
            c[a] = if (k >> a) & 1 == 1 { max[a] - 1 } else { min[a] };
        }
    }
    out
}

/// Octree-accelerated fit volume.
///
/// Homogeneous leaves share one PCA at the leaf center (ξ = its sample
/// mean). Interpolate leaves blend the frames of PCAs at the leaf corners,
/// which are shared between neighboring leaves. PerVoxel leaves fit every
/// voxel. Outside Homogeneous leaves ξ is the voxel's own data value.
pub fn build_fit_volume(vol: &MultivariateVolume, octree: &Octree, params: &FitParams) -> Result<FitVolume> {
    let m = vol.attr_count();
    params.validate(m)?;
    let grid = vol.grid();
    if octree.grid != grid {
        return Err(Error::InvalidParam("octree was built for a different grid".into()));
    }
    let leaves: Vec<_> = octree.leaves().collect();

    let mut corner_keys: Vec<[usize; 3]> = leaves
        .iter()
        .filter(|l| l.strategy == Some(LeafStrategy::Interpolate))
        .flat_map(|l| leaf_corners(l.min, l.max))
        .collect();
    corner_keys.sort_unstable();
    corner_keys.dedup();
    let corner_fits: HashMap<[usize; 3], LocalFit> = corner_keys
        .par_iter()
        .map(|&c| (c, fit_at(vol, voxel_pos(c), params)))
        .collect();

    // (voxel fits, PCA count, fallback count) per leaf
    type LeafFits = (Vec<(usize, LocalFit)>, usize, usize);
    let per_leaf: Vec<LeafFits> = leaves
        .par_iter()
        .map(|leaf| {
            let mut out = Vec::with_capacity(leaf.voxel_count());
            let mut pcas = 0;
            let mut fallbacks = 0;
            match leaf.strategy.expect("leaf strategy") {
                LeafStrategy::Homogeneous => {
                    let center = [0, 1, 2].map(|a| (leaf.min[a] + leaf.max[a] - 1) as f64 / 2.0);
                    let f = fit_at(vol, center, params);
                    pcas += 1;
                    for c in leaf.voxels() {
                        out.push((grid.index(c[0], c[1], c[2]), f.clone()));
                    }
                }
                LeafStrategy::PerVoxel => {
                    for c in leaf.voxels() {
                        let v = grid.index(c[0], c[1], c[2]);
                        out.push((v, with_own_value(fit_at(vol, voxel_pos(c), params), vol, v)));
                        pcas += 1;
                    }
                }
                LeafStrategy::Interpolate => {
                    let keys = leaf_corners(leaf.min, leaf.max);
                    let first = &corner_fits[&keys[0]];
                    let corners: Vec<LocalFit> = keys.iter().map(|k| align_signs(&corner_fits[k], first)).collect();
                    for c in leaf.voxels() {
                        let t = [0, 1, 2].map(|a| {
                            let span = (leaf.max[a] - 1 - leaf.min[a]) as f64;
                            if span > 0.0 {
                                (c[a] - leaf.min[a]) as f64 / span
                            } else {
                                0.0
                            }
                        });
                        let w = trilinear_weights(t);
                        let frame = interpolate_frame(&corners, &w);
                        fallbacks += frame.fallback as usize;
                        let mut lambda = vec![0.0; m];
                        for (cf, &wk) in corners.iter().zip(&w) {
                            for (l, e) in lambda.iter_mut().zip(&cf.eigenvalues) {
                                *l += wk * e;
                            }
                        }
                        let l1 = lambda[0];
                        let l2 = lambda.get(1).copied().unwrap_or(0.0);
                        let v = grid.index(c[0], c[1], c[2]);
                        let f = LocalFit {
                            xi: vol.data_value(v),
                            e1: frame.e1,
                            e2: frame.e2,
                            valid2flat: m > 1 && corners.iter().all(|c| c.valid2flat) && l2 > EIGEN_FLOOR && l2 >= EIGEN_FLOOR * l1,
                            eigenvalues: lambda,
                        };
                        out.push((v, f));
                    }
                }
            }
            (out, pcas, fallbacks)
        })
        .collect();

    let mut fv = FitVolume::with_grid(grid, m);
    fv.stats.pca_count = corner_fits.len();
    for (fits, pcas, fallbacks) in per_leaf {
        for (v, f) in &fits {
            fv.store(*v, f);
        }
        fv.stats.pca_count += pcas;
        fv.stats.fallback_count += fallbacks;
    }
    fv.stats.fresh_fit_proxy = octree.fresh_fit_proxy();
    Ok(fv)
}

/// Data-domain fit: the neighborhood of a voxel is every voxel whose data
/// value lies within `radius` of its own, with no spatial constraint.
///
/// Values are binned on a lattice of cell size `radius / 2`; a voxel's
/// neighborhood is the union of cells whose centers lie within `radius` of
/// its cell center, so all voxels of one cell share a fit.
pub fn fit_data_domain(vol: &MultivariateVolume, radius: f64) -> Result<FitVolume> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParam("data-domain radius must be positive".into()));
    }
    let m = vol.attr_count();
    let grid = vol.grid();
    let cell = radius / 2.0;
    let bins = (1.0 / cell).ceil() as i64 + 1;
    let key_of = |v: usize| -> Vec<i64> { (0..m).map(|a| ((vol.attr(a)[v] as f64 / cell).floor() as i64).min(bins - 1)).collect() };

    struct Moments {
        n: f64,
        sum: Vec<f64>,
        outer: Vec<f64>,
    }
    let mut cells: HashMap<Vec<i64>, Moments> = HashMap::new();
    let mut keys = Vec::with_capacity(grid.len());
    for v in 0..grid.len() {
        let k = key_of(v);
        let x = vol.data_value(v);
        let e = cells.entry(k.clone()).or_insert_with(|| Moments {
            n: 0.0,
            sum: vec![0.0; m],
            outer: vec![0.0; m * m],
        });
        e.n += 1.0;
        for i in 0..m {
            e.sum[i] += x[i];
            for j in 0..m {
                e.outer[i * m + j] += x[i] * x[j];
            }
        }
        keys.push(k);
    }

    let reach = (radius / cell).ceil() as i64;
    let mut offsets: Vec<Vec<i64>> = vec![vec![]];
    for _ in 0..m {
        offsets = offsets
            .into_iter()
            .flat_map(|o| (-reach..=reach).map(move |d| o.iter().copied().chain([d]).collect()))
            .collect();
    }
    offsets.retain(|o: &Vec<i64>| o.iter().map(|&d| (d as f64 * cell).powi(2)).sum::<f64>() <= radius * radius + 1e-12);

    let mut cell_keys: Vec<&Vec<i64>> = cells.keys().collect();
    cell_keys.sort();
    let fits: HashMap<&Vec<i64>, LocalFit> = cell_keys
        .par_iter()
        .map(|&k| {
            let mut n = 0.0;
            let mut sum = vec![0.0; m];
            let mut outer = vec![0.0; m * m];
            let mut probe = k.clone();
            for o in &offsets {
                for a in 0..m {
                    probe[a] = k[a] + o[a];
                }
                if let Some(c) = cells.get(&probe) {
                    n += c.n;
                    sum.iter_mut().zip(&c.sum).for_each(|(a, b)| *a += b);
                    outer.iter_mut().zip(&c.outer).for_each(|(a, b)| *a += b);
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let denom = if n > 1.0 { n - 1.0 } else { 1.0 };
            let cov = DMatrix::from_fn(m, m, |i, j| (outer[i * m + j] - n * mean[i] * mean[j]) / denom);
            (k, pca_from_covariance(mean, cov))
        })
        .collect();

    let mut fv = FitVolume::with_grid(grid, m);
    for (v, k) in keys.iter().enumerate() {
        let f = with_own_value(fits[k].clone(), vol, v);
        fv.store(v, &f);
    }
    fv.stats.pca_count = fits.len();
    fv.stats.fresh_fit_proxy = fits.len();
    Ok(fv)
}
