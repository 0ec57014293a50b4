//! Precomputation pipeline with content-addressed caching: octree, fits,
//! indexed points and density buffers. Shared by the CLI and the service,
//! so both produce identical artifacts for identical inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use image::RgbaImage;

use crate::classify::{classify_volume, ColorOpacityVolume, TransferFunctionSet};
use crate::density::{kde_dynamic, splat_subspace, DensityBuffer, KdeParams, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::fit::{build_fit_volume, fit_per_voxel, FitParams, FitVolume};
use crate::indexed::{build_indexed_volumes, validate_order, AxisLayout, IndexedPointVolume};
use crate::octree::{build_octree, Octree, OctreeParams};
use crate::render::{raycast, Camera, RenderParams};
use crate::saliency::SaliencyField;
use crate::volume::MultivariateVolume;

/// Environment variable naming the default cache directory.
pub const CACHE_ENV: &str = "CIPVOL_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineParams {
    pub t_s: f64,
    pub t_e: f64,
    pub min_node: usize,
    pub halfwidth: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Attribute order on the parallel axes; identity when absent.
    pub axis_order: Option<Vec<usize>>,
    pub do2flat: bool,
    /// Fit every voxel instead of using the octree.
    pub per_voxel: bool,
    pub width: usize,
    pub height: usize,
    /// Dynamic-bandwidth KDE on the splatted buffers; raw splats when absent.
    pub kde: Option<KdeParams>,
}

impl Default for PipelineParams {
    fn default() -> Self {
        let o = OctreeParams::default();
        let f = FitParams::default();
        PipelineParams {
            t_s: o.t_s,
            t_e: o.t_e,
            min_node: o.min_node,
            halfwidth: f.halfwidth,
            n_samples: f.n_samples,
            seed: f.seed,
            axis_order: None,
            do2flat: true,
            per_voxel: false,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            kde: Some(KdeParams::default()),
        }
    }
}

impl PipelineParams {
    pub fn octree(&self) -> OctreeParams {
        OctreeParams {
            t_s: self.t_s,
            t_e: self.t_e,
            min_node: self.min_node,
        }
    }

    pub fn fit(&self) -> FitParams {
        FitParams {
            halfwidth: self.halfwidth,
            n_samples: self.n_samples,
            seed: self.seed,
        }
    }

    pub fn order(&self, m: usize) -> Vec<usize> {
        self.axis_order.clone().unwrap_or_else(|| (0..m).collect())
    }

    /// Checks everything that can be checked before any computation.
    pub fn validate(&self, m: usize) -> Result<()> {
        self.octree().validate()?;
        self.fit().validate(m)?;
        validate_order(&self.order(m), m)?;
        if self.do2flat && m < 3 {
            return Err(Error::InvalidParam("2-flats need at least 3 attributes".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParam("density image must be non-empty".into()));
        }
        if let Some(k) = &self.kde {
            k.validate()?;
        }
        Ok(())
    }
}

/// Cache keys; each stage's key covers every input of that stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKeys {
    pub dataset: String,
    pub octree: Option<String>,
    pub fit: String,
    pub indexed: String,
    pub density: String,
}

fn hash_key(parts: &impl Serialize) -> String {
    let h = Sha256::digest(serde_json::to_vec(parts).expect("serializable"));
    hex::encode(&h[..16])
}

impl CacheKeys {
    pub fn new(dataset_hash: &str, p: &PipelineParams, m: usize) -> Self {
        let octree = (!p.per_voxel).then(|| hash_key(&("octree", dataset_hash, p.t_s, p.t_e, p.min_node, p.halfwidth)));
        let fit = hash_key(&("fit", dataset_hash, &octree, p.halfwidth, p.n_samples, p.seed));
        let indexed = hash_key(&("indexed", &fit, p.order(m), p.do2flat));
        let density = hash_key(&("density", &indexed, p.width, p.height, p.kde));
        CacheKeys {
            dataset: dataset_hash.to_string(),
            octree,
            fit,
            indexed,
            density,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEntry {
    pub subspace: usize,
    pub buffer: String,
    pub splat: String,
    pub buffer_hash: String,
    pub total_mass: f64,
}

/// Index of every artifact of one precompute run, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub keys: CacheKeys,
    pub params: PipelineParams,
    pub dims: [usize; 3],
    pub attr_names: Vec<String>,
    pub octree: Option<String>,
    pub leaf_count: Option<usize>,
    pub fit: String,
    pub pca_count: usize,
    pub fresh_fit_proxy: usize,
    pub indexed: String,
    pub subspaces: usize,
    pub densities: Vec<DensityEntry>,
}

/// Work actually performed by one call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkDone {
    pub pca_count: usize,
    pub octree_built: bool,
    pub indexed_built: bool,
    pub densities_built: usize,
}

#[derive(Clone, Debug)]
pub struct Precomputed {
    pub manifest: Manifest,
    pub octree: Option<Octree>,
    pub fit: FitVolume,
    pub ipv: IndexedPointVolume,
    pub splats: Vec<DensityBuffer>,
    pub densities: Vec<DensityBuffer>,
    pub work: WorkDone,
}

/// Stage names reported to progress callbacks.
pub const STAGES: [&str; 5] = ["saliency", "octree", "fit", "indexed", "density"];

pub fn manifest_path(dir: &Path, keys: &CacheKeys) -> PathBuf {
    dir.join(format!("manifest-{}.json", keys.density))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_bin<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match fs::read(path) {
        Ok(b) => bincode::deserialize(&b).map(Some).map_err(|e| Error::CorruptCache {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn save_bin<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, &bincode::serialize(v).expect("serializable"))
}

/// Run (or reuse from `cache`) every precompute stage. Stages whose
/// artifact is already cached under the same key are loaded instead of
/// recomputed.
pub fn precompute(vol: &MultivariateVolume, params: &PipelineParams, cache: Option<&Path>, progress: &(dyn Fn(&str) + Sync)) -> Result<Precomputed> {
    let m = vol.attr_count();
    params.validate(m)?;
    if let Some(dir) = cache {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let keys = CacheKeys::new(&vol.content_hash(), params, m);
    let file = |name: String| cache.map(|d| d.join(name));
    let mut work = WorkDone::default();

    let mut octree = None;
    let mut octree_file = None;
    if let Some(k) = &keys.octree {
        let path = file(format!("octree-{k}.bin"));
        let cached = match &path {
            Some(p) => load_bin::<Octree>(p)?,
            None => None,
        };
        octree = Some(match cached {
            Some(o) => o,
            None => {
                progress("saliency");
                let s = SaliencyField::compute(vol, params.halfwidth);
                progress("octree");
                let o = build_octree(vol.grid(), &s.filtered, params.octree())?;
                if let Some(p) = &path {
                    save_bin(p, &o)?;
                }
                work.octree_built = true;
                o
            }
        });
        octree_file = Some(format!("octree-{k}.bin"));
    }

    let fit_path = file(format!("fit-{}.bin", keys.fit));
    let fit = match fit_path.as_deref().map(load_bin::<FitVolume>).transpose()?.flatten() {
        Some(f) => f,
        None => {
            progress("fit");
            let f = match &octree {
                Some(o) => build_fit_volume(vol, o, &params.fit())?,
                None => fit_per_voxel(vol, &params.fit())?,
            };
            work.pca_count = f.stats.pca_count;
            if let Some(p) = &fit_path {
                save_bin(p, &f)?;
            }
            f
        }
    };

    let ipv_path = file(format!("indexed-{}.bin", keys.indexed));
    let ipv = match ipv_path.as_deref().map(load_bin::<IndexedPointVolume>).transpose()?.flatten() {
        Some(i) => i,
        None => {
            progress("indexed");
            let i = build_indexed_volumes(&fit, &params.order(m), AxisLayout::new(m), params.do2flat)?;
            work.indexed_built = true;
            if let Some(p) = &ipv_path {
                save_bin(p, &i)?;
            }
            i
        }
    };

    let mut splats = Vec::with_capacity(ipv.subspaces);
    let mut densities = Vec::with_capacity(ipv.subspaces);
    let mut entries = Vec::with_capacity(ipv.subspaces);
    for s in 0..ipv.subspaces {
        let splat_name = format!("splat-{}-{s}.bin", keys.density);
        let buf_name = format!("density-{}-{s}.bin", keys.density);
        let cached = match (file(splat_name.clone()), file(buf_name.clone())) {
            (Some(a), Some(b)) => load_bin::<DensityBuffer>(&a)?.zip(load_bin::<DensityBuffer>(&b)?),
            _ => None,
        };
        let (splat, buf) = match cached {
            Some(pair) => pair,
            None => {
                if s == 0 {
                    progress("density");
                }
                let splat = splat_subspace(&ipv, s, params.width, params.height);
                let buf = match &params.kde {
                    Some(k) => kde_dynamic(&splat, k)?,
                    None => splat.clone(),
                };
                if let Some(dir) = cache {
                    save_bin(&dir.join(&splat_name), &splat)?;
                    save_bin(&dir.join(&buf_name), &buf)?;
                }
                work.densities_built += 1;
                (splat, buf)
            }
        };
        entries.push(DensityEntry {
            subspace: s,
            buffer: buf_name,
            splat: splat_name,
            buffer_hash: buf.content_hash(),
            total_mass: buf.total_mass,
        });
        splats.push(splat);
        densities.push(buf);
    }

    let manifest = Manifest {
        params: params.clone(),
        dims: vol.dims(),
        attr_names: vol.attributes().iter().map(|a| a.name.clone()).collect(),
        octree: octree_file,
        leaf_count: octree.as_ref().map(|o| o.leaf_count()),
        fit: format!("fit-{}.bin", keys.fit),
        pca_count: fit.stats.pca_count,
        fresh_fit_proxy: fit.stats.fresh_fit_proxy,
        indexed: format!("indexed-{}.bin", keys.indexed),
        subspaces: ipv.subspaces,
        densities: entries,
        keys,
    };
    if let Some(dir) = cache {
        let text = serde_json::to_string_pretty(&manifest).expect("serializable");
        write_atomic(&manifest_path(dir, &manifest.keys), text.as_bytes())?;
    }
    Ok(Precomputed {
        manifest,
        octree,
        fit,
        ipv,
        splats,
        densities,
        work,
    })
}

fn require<T>(path: PathBuf, v: Option<T>) -> Result<T> {
    v.ok_or(Error::MissingCache(path))
}

/// Load a finished precompute run from the cache without computing
/// anything; missing artifacts are reported as [`Error::MissingCache`].
pub fn load_cached(vol: &MultivariateVolume, params: &PipelineParams, dir: &Path) -> Result<Precomputed> {
    let m = vol.attr_count();
    params.validate(m)?;
    let keys = CacheKeys::new(&vol.content_hash(), params, m);
    let mpath = manifest_path(dir, &keys);
    let text = match fs::read_to_string(&mpath) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingCache(mpath)),
        Err(e) => return Err(Error::io(&mpath, e)),
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptCache {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if manifest.keys != keys {
        return Err(Error::CorruptCache {
            path: mpath,
            msg: "manifest keys do not match the requested inputs".into(),
        });
    }
    let octree = match &manifest.octree {
        Some(f) => {
            let p = dir.join(f);
            Some(require(p.clone(), load_bin::<Octree>(&p)?)?)
        }
        None => None,
    };
    let p = dir.join(&manifest.fit);
    let fit = require(p.clone(), load_bin::<FitVolume>(&p)?)?;
    let p = dir.join(&manifest.indexed);
    let ipv = require(p.clone(), load_bin::<IndexedPointVolume>(&p)?)?;
    let mut splats = Vec::new();
    let mut densities = Vec::new();
    for e in &manifest.densities {
        let p = dir.join(&e.splat);
        splats.push(require(p.clone(), load_bin::<DensityBuffer>(&p)?)?);
        let p = dir.join(&e.buffer);
        densities.push(require(p.clone(), load_bin::<DensityBuffer>(&p)?)?);
    }
    Ok(Precomputed {
        manifest,
        octree,
        fit,
        ipv,
        splats,
        densities,
        work: WorkDone::default(),
    })
}

/// Classify with `tf` and ray cast; Phong shading uses the first attribute.
pub fn classify_and_render(vol: &MultivariateVolume, pre: &Precomputed, tf: &TransferFunctionSet, cam: &Camera, params: &RenderParams) -> Result<(ColorOpacityVolume, RgbaImage)> {
    let covol = classify_volume(&pre.ipv, &pre.fit, tf)?;
    let img = raycast(&covol, cam, params, Some(vol.attr(0)))?;
    Ok((covol, img))
}

/// Cache directory from the environment, if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{a3_spec, gen_synthetic};

    fn small() -> MultivariateVolume {
        gen_synthetic(&a3_spec([12, 12, 12]), 2).unwrap().0
    }

    fn fast() -> PipelineParams {
        PipelineParams {
            n_samples: 30,
            width: 60,
            height: 20,
            kde: Some(KdeParams { r_max: 3, mass_cap: 5.0 }),
            ..Default::default()
        }
    }

    #[test]
    fn rejects_t_e_above_t_s_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let p = PipelineParams {
            t_s: 0.01,
            t_e: 0.02,
            ..fast()
        };
        let calls = std::sync::Mutex::new(0);
        let r = precompute(&small(), &p, Some(dir.path()), &|_| *calls.lock().unwrap() += 1);
        assert!(matches!(r, Err(Error::InvalidParam(_))));
        assert_eq!(*calls.lock().unwrap(), 0);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn second_run_is_cache_hit() {
        let dir = tempfile::tempdir().unwrap();
        let vol = small();
        let a = precompute(&vol, &fast(), Some(dir.path()), &|_| {}).unwrap();
        assert!(a.work.pca_count > 0 && a.work.octree_built);
        let stages = std::sync::Mutex::new(Vec::new());
        let b = precompute(&vol, &fast(), Some(dir.path()), &|s| stages.lock().unwrap().push(s.to_string())).unwrap();
        assert_eq!(b.work, WorkDone::default());
        assert!(stages.lock().unwrap().is_empty());
        assert_eq!(a.fit, b.fit);
        assert_eq!(a.densities, b.densities);
        let c = load_cached(&vol, &fast(), dir.path()).unwrap();
        assert_eq!(c.manifest, a.manifest);
        assert_eq!(c.ipv, a.ipv);
    }

    #[test]
    fn changed_params_miss_only_later_stages() {
        let dir = tempfile::tempdir().unwrap();
        let vol = small();
        precompute(&vol, &fast(), Some(dir.path()), &|_| {}).unwrap();
        let p = PipelineParams {
            axis_order: Some(vec![2, 0, 1]),
            ..fast()
        };
        assert!(matches!(load_cached(&vol, &p, dir.path()), Err(Error::MissingCache(_))));
        let r = precompute(&vol, &p, Some(dir.path()), &|_| {}).unwrap();
        assert_eq!(r.work.pca_count, 0);
        assert!(r.work.indexed_built);
        assert_eq!(r.ipv.axis_order, vec![2, 0, 1]);
    }

    #[test]
    fn cached_equals_uncached() {
        let dir = tempfile::tempdir().unwrap();
        let vol = small();
        let a = precompute(&vol, &fast(), None, &|_| {}).unwrap();
        let b = precompute(&vol, &fast(), Some(dir.path()), &|_| {}).unwrap();
        assert_eq!(a.manifest, b.manifest.clone());
        assert_eq!(a.densities, b.densities);
    }

    #[test]
    fn params_json_roundtrip_and_unknown_fields() {
        let p = fast();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PipelineParams>(&s).unwrap(), p);
        assert!(serde_json::from_str::<PipelineParams>("{\"t_s\": 0.1, \"bogus\": 1}").is_err());
        let partial: PipelineParams = serde_json::from_str("{\"t_s\": 0.1}").unwrap();
        assert_eq!(partial.t_e, 0.01);
    }
}
