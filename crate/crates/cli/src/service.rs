//! HTTP service under `/api/v1`: datasets, precompute jobs, density
//! images, transfer functions, linking, rendered frames and SPLOM tiles.
//!
//! Transfer-function edits have a single writer and publish immutable
//! snapshots (TF, classified volume, precompute results) behind an `Arc`;
//! readers clone the `Arc` and never observe a half-applied edit.

use std::collections::BTreeMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cipvol_core::classify::{classify_volume, ColorOpacityVolume, LinkIndex, LinkRegion, TransferFunctionSet, DEFAULT_LINK_STRIDE};
use cipvol_core::density::{encode_png, tone_map};
use cipvol_core::pipeline::{precompute, PipelineParams, Precomputed};
use cipvol_core::render::{raycast, Camera, RenderParams, Shading};
use cipvol_core::volume::{load_volume, volume_from_descriptor, DatasetDescriptor, MultivariateVolume};
use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

pub const BUFFER_HASH_HEADER: &str = "x-buffer-hash";
pub const TF_VERSION_HEADER: &str = "x-tf-version";
pub const CAMERA_HEADER: &str = "x-camera";

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<cipvol_core::Error> for ApiError {
    fn from(e: cipvol_core::Error) -> Self {
        use cipvol_core::Error as E;
        let code = match e {
            E::InvalidParam(_) | E::DegenerateCamera(_) | E::TooFewAttributes(_) | E::TooFewSamples { .. } | E::Descriptor { .. } | E::SizeMismatch { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

/// Results of a finished precompute run.
pub struct Ready {
    pub pre: Precomputed,
    pub link: LinkIndex,
}

/// One published transfer-function state.
pub struct TfSnapshot {
    pub version: u64,
    pub tf: TransferFunctionSet,
    pub ready: Option<Arc<Ready>>,
    pub covol: Option<Arc<ColorOpacityVolume>>,
}

pub struct Dataset {
    pub id: String,
    pub vol: Arc<MultivariateVolume>,
    busy: AtomicBool,
    ready: RwLock<Option<Arc<Ready>>>,
    snapshot: RwLock<Arc<TfSnapshot>>,
    writer: tokio::sync::Mutex<()>,
}

impl Dataset {
    pub fn new(id: String, vol: MultivariateVolume) -> Self {
        Dataset {
            id,
            vol: Arc::new(vol),
            busy: AtomicBool::new(false),
            ready: RwLock::new(None),
            snapshot: RwLock::new(Arc::new(TfSnapshot {
                version: 0,
                tf: TransferFunctionSet::default(),
                ready: None,
                covol: None,
            })),
            writer: tokio::sync::Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<TfSnapshot> {
        self.snapshot.read().unwrap().clone()
    }

    pub fn ready(&self) -> Option<Arc<Ready>> {
        self.ready.read().unwrap().clone()
    }

    /// Classify `tf` against the current results and publish it as the next
    /// snapshot. Callers hold the writer lock.
    async fn publish(&self, tf: TransferFunctionSet) -> ApiResult<Arc<TfSnapshot>> {
        let ready = self.ready();
        let covol = match &ready {
            Some(r) => {
                let (r, tf) = (r.clone(), tf.clone());
                let c = tokio::task::spawn_blocking(move || classify_volume(&r.pre.ipv, &r.pre.fit, &tf))
                    .await
                    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
                Some(Arc::new(c))
            }
            None => None,
        };
        let mut slot = self.snapshot.write().unwrap();
        let snap = Arc::new(TfSnapshot {
            version: slot.version + 1,
            tf,
            ready,
            covol,
        });
        *slot = snap.clone();
        Ok(snap)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub dataset: String,
    pub state: JobState,
    pub stage: Option<String>,
    pub error: Option<String>,
    pub pca_count: Option<usize>,
}

pub struct AppState {
    pub cache_dir: Option<PathBuf>,
    datasets: RwLock<BTreeMap<String, Arc<Dataset>>>,
    jobs: Arc<Mutex<BTreeMap<u64, JobStatus>>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(cache_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            cache_dir,
            datasets: RwLock::new(BTreeMap::new()),
            jobs: Arc::new(Mutex::new(BTreeMap::new())),
            next_job: AtomicU64::new(1),
        })
    }

    pub fn insert(&self, id: &str, vol: MultivariateVolume) -> Arc<Dataset> {
        let ds = Arc::new(Dataset::new(id.to_string(), vol));
        self.datasets.write().unwrap().insert(id.to_string(), ds.clone());
        ds
    }

    pub fn dataset(&self, id: &str) -> ApiResult<Arc<Dataset>> {
        self.datasets.read().unwrap().get(id).cloned().ok_or_else(|| not_found(format!("unknown dataset `{id}`")))
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().unwrap().get(&id).cloned()
    }

    /// Start a precompute job; fails with 409 while another runs on the
    /// same dataset. Returns the job id.
    pub fn start_precompute(self: &Arc<Self>, ds: Arc<Dataset>, params: PipelineParams) -> ApiResult<u64> {
        params.validate(ds.vol.attr_count())?;
        if ds.busy.swap(true, Ordering::SeqCst) {
            return Err(ApiError(StatusCode::CONFLICT, format!("precompute already running for `{}`", ds.id)));
        }
        let id = self.next_job.fetch_add(1, Ordering::SeqCst);
        self.jobs.lock().unwrap().insert(
            id,
            JobStatus {
                id,
                dataset: ds.id.clone(),
                state: JobState::Running,
                stage: None,
                error: None,
                pca_count: None,
            },
        );
        let state = self.clone();
        tokio::spawn(async move {
            let jobs = state.jobs.clone();
            let (vol, cache) = (ds.vol.clone(), state.cache_dir.clone());
            let result = tokio::task::spawn_blocking(move || {
                let pre = precompute(&vol, &params, cache.as_deref(), &|stage| {
                    if let Some(j) = jobs.lock().unwrap().get_mut(&id) {
                        j.stage = Some(stage.to_string());
                    }
                })?;
                let link = LinkIndex::build(&vol, &pre.ipv, DEFAULT_LINK_STRIDE)?;
                Ok::<_, cipvol_core::Error>(Ready { pre, link })
            })
            .await;
            let outcome = match result {
                Ok(Ok(ready)) => {
                    let pca = ready.pre.work.pca_count;
                    *ds.ready.write().unwrap() = Some(Arc::new(ready));
                    let _w = ds.writer.lock().await;
                    let tf = ds.snapshot().tf.clone();
                    ds.publish(tf).await.map(|_| pca).map_err(|e| e.1)
                }
                Ok(Err(e)) => Err(e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            if let Some(j) = state.jobs.lock().unwrap().get_mut(&id) {
                match outcome {
                    Ok(pca) => {
                        j.state = JobState::Done;
                        j.pca_count = Some(pca);
                    }
                    Err(msg) => {
                        j.state = JobState::Failed;
                        j.error = Some(msg);
                    }
                }
            }
            ds.busy.store(false, Ordering::SeqCst);
        });
        Ok(id)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/datasets", get(list_datasets).post(add_dataset))
        .route("/api/v1/datasets/{id}", get(dataset_info))
        .route("/api/v1/datasets/{id}/precompute", post(start_job))
        .route("/api/v1/jobs/{job}", get(job_status))
        .route("/api/v1/datasets/{id}/density/{subspace}", get(density))
        .route("/api/v1/datasets/{id}/tf", get(get_tf).put(put_tf))
        .route("/api/v1/datasets/{id}/link", post(link))
        .route("/api/v1/datasets/{id}/frame", get(frame))
        .route("/api/v1/datasets/{id}/splom/{a}/{b}", get(splom))
        .with_state(state)
}

#[derive(Serialize, Deserialize)]
pub struct DatasetInfo {
    pub id: String,
    pub dims: [usize; 3],
    pub attributes: Vec<String>,
    pub busy: bool,
    pub ready: bool,
    pub subspaces: Option<usize>,
    pub tf_version: u64,
}

fn info(ds: &Dataset) -> DatasetInfo {
    DatasetInfo {
        id: ds.id.clone(),
        dims: ds.vol.dims(),
        attributes: ds.vol.attributes().iter().map(|a| a.name.clone()).collect(),
        busy: ds.busy.load(Ordering::SeqCst),
        ready: ds.ready().is_some(),
        subspaces: ds.ready().map(|r| r.pre.ipv.subspaces),
        tf_version: ds.snapshot().version,
    }
}

async fn list_datasets(State(st): State<Arc<AppState>>) -> Json<Vec<DatasetInfo>> {
    let all: Vec<Arc<Dataset>> = st.datasets.read().unwrap().values().cloned().collect();
    Json(all.iter().map(|d| info(d)).collect())
}

#[derive(Deserialize)]
pub struct AddDataset {
    pub id: String,
    /// Descriptor file on the server.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Inline descriptor; relative raw paths resolve against the working
    /// directory.
    #[serde(default)]
    pub descriptor: Option<DatasetDescriptor>,
}

async fn add_dataset(State(st): State<Arc<AppState>>, Json(req): Json<AddDataset>) -> ApiResult<(StatusCode, Json<DatasetInfo>)> {
    if req.id.is_empty() || !req.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(bad_request("dataset id must be non-empty [A-Za-z0-9_-]"));
    }
    let vol = tokio::task::spawn_blocking(move || match (req.path, req.descriptor) {
        (Some(p), None) => load_volume(&p),
        (None, Some(d)) => volume_from_descriptor(&d, FsPath::new("."), FsPath::new("<request>")),
        _ => Err(cipvol_core::Error::InvalidParam("give exactly one of `path` or `descriptor`".into())),
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let ds = st.insert(&req.id, vol);
    Ok((StatusCode::CREATED, Json(info(&ds))))
}

async fn dataset_info(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let ds = st.dataset(&id)?;
    let mut v = serde_json::to_value(info(&ds)).unwrap();
    if let Some(r) = ds.ready() {
        v["manifest"] = serde_json::to_value(&r.pre.manifest).unwrap();
    }
    Ok(Json(v))
}

async fn start_job(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let ds = st.dataset(&id)?;
    let params: PipelineParams = if body.iter().all(u8::is_ascii_whitespace) {
        PipelineParams::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("pipeline params: {e}")))?
    };
    let job = st.start_precompute(ds, params)?;
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job": job }))))
}

async fn job_status(State(st): State<Arc<AppState>>, Path(job): Path<u64>) -> ApiResult<Json<JobStatus>> {
    st.job(job).map(Json).ok_or_else(|| not_found(format!("unknown job {job}")))
}

fn require_ready(ds: &Dataset) -> ApiResult<Arc<Ready>> {
    ds.ready().ok_or_else(|| {
        if ds.busy.load(Ordering::SeqCst) {
            ApiError(StatusCode::CONFLICT, format!("precompute for `{}` is still running", ds.id))
        } else {
            not_found(format!("dataset `{}` has not been precomputed", ds.id))
        }
    })
}

#[derive(Deserialize)]
pub struct DensityQuery {
    #[serde(default = "one")]
    pub gamma: f64,
    /// `png` (tone-mapped) or `f32` (raw float tile).
    #[serde(default)]
    pub format: Option<String>,
}

fn one() -> f64 {
    1.0
}

async fn density(State(st): State<Arc<AppState>>, Path((id, s)): Path<(String, usize)>, Query(q): Query<DensityQuery>) -> ApiResult<Response> {
    let ds = st.dataset(&id)?;
    let ready = require_ready(&ds)?;
    let buf = ready.pre.densities.get(s).ok_or_else(|| not_found(format!("no subspace {s}")))?;
    let hash = HeaderValue::from_str(&buf.content_hash()).unwrap();
    let (ctype, body) = match q.format.as_deref().unwrap_or("png") {
        "png" => ("image/png", encode_png(&tone_map(buf, q.gamma)?)?),
        "f32" => ("application/octet-stream", buf.to_bytes()),
        other => return Err(bad_request(format!("unknown format `{other}`"))),
    };
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static(ctype)), (header::HeaderName::from_static(BUFFER_HASH_HEADER), hash)], body).into_response())
}

async fn get_tf(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = st.dataset(&id)?.snapshot();
    Ok(([(header::HeaderName::from_static(TF_VERSION_HEADER), HeaderValue::from(snap.version))], Json(snap.tf.clone())).into_response())
}

async fn put_tf(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let ds = st.dataset(&id)?;
    let text = std::str::from_utf8(&body).map_err(|_| bad_request("body is not UTF-8"))?;
    let tf = TransferFunctionSet::from_json(text)?;
    let _w = ds.writer.lock().await;
    let snap = ds.publish(tf).await?;
    Ok(([(header::HeaderName::from_static(TF_VERSION_HEADER), HeaderValue::from(snap.version))], Json(serde_json::json!({ "version": snap.version }))).into_response())
}

async fn link(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(region): Json<LinkRegion>) -> ApiResult<Json<serde_json::Value>> {
    let ds = st.dataset(&id)?;
    let ready = require_ready(&ds)?;
    let ids = ready.link.query(&region)?;
    Ok(Json(serde_json::json!({ "count": ids.len(), "ids": ids })))
}

#[derive(Deserialize, Default)]
pub struct FrameQuery {
    pub eye: Option<String>,
    pub look_at: Option<String>,
    pub up: Option<String>,
    pub fov: Option<f64>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub sampling_rate: Option<f64>,
    pub shading: Option<Shading>,
}

fn vec3(s: &str) -> ApiResult<[f64; 3]> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad_request(format!("bad vector `{s}`")))?;
    <[f64; 3]>::try_from(v).map_err(|_| bad_request(format!("vector `{s}` needs 3 components")))
}

impl FrameQuery {
    pub fn camera(&self, vol: &MultivariateVolume) -> ApiResult<Camera> {
        let (w, h) = (self.width.unwrap_or(256), self.height.unwrap_or(256));
        if w > 4096 || h > 4096 {
            return Err(bad_request("frame larger than 4096 pixels"));
        }
        let mut cam = Camera::default_for(vol.grid(), w, h);
        if let Some(e) = &self.eye {
            cam.eye = vec3(e)?;
        }
        if let Some(l) = &self.look_at {
            cam.look_at = vec3(l)?;
        }
        if let Some(u) = &self.up {
            cam.up = vec3(u)?;
        }
        if let Some(f) = self.fov {
            cam.fov_deg = f;
        }
        cam.basis()?;
        Ok(cam)
    }
}

/// Render one frame from one snapshot; returns the PNG and the snapshot
/// version it came from.
pub fn render_frame(vol: &MultivariateVolume, snap: &TfSnapshot, cam: &Camera, params: &RenderParams) -> cipvol_core::Result<Vec<u8>> {
    let covol = match &snap.covol {
        Some(c) => c.clone(),
        None => Arc::new(ColorOpacityVolume::transparent(vol.grid())),
    };
    encode_png(&raycast(&covol, cam, params, Some(vol.attr(0)))?)
}

async fn frame(State(st): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FrameQuery>) -> ApiResult<Response> {
    let ds = st.dataset(&id)?;
    let cam = q.camera(&ds.vol)?;
    let mut params = RenderParams::default();
    if let Some(r) = q.sampling_rate {
        params.sampling_rate = r;
    }
    if let Some(s) = q.shading {
        params.shading = s;
    }
    params.validate()?;
    let snap = ds.snapshot();
    let version = snap.version;
    let cam_json = serde_json::to_string(&cam).unwrap();
    let vol = ds.vol.clone();
    let png = tokio::task::spawn_blocking(move || render_frame(&vol, &snap, &cam, &params))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::HeaderName::from_static(TF_VERSION_HEADER), HeaderValue::from(version)),
            (header::HeaderName::from_static(CAMERA_HEADER), HeaderValue::from_str(&cam_json).unwrap()),
        ],
        png,
    )
        .into_response())
}

#[derive(Deserialize)]
pub struct SplomQuery {
    #[serde(default = "default_tile")]
    pub size: u32,
}

fn default_tile() -> u32 {
    256
}

/// Scatterplot of attributes `a` (x) and `b` (y) over the linked voxel
/// subset; classified voxels take their transfer-function color.
pub fn splom_tile(link: &LinkIndex, covol: Option<&ColorOpacityVolume>, a: usize, b: usize, size: u32) -> RgbaImage {
    let mut img = RgbaImage::from_pixel(size, size, Rgba([255, 255, 255, 255]));
    let s = (size - 1) as f64;
    for (v, val) in link.ids.iter().zip(link.values()) {
        let (x, y) = ((val[a] * s).round() as u32, ((1.0 - val[b]) * s).round() as u32);
        let px = match covol.map(|c| c.rgba[*v]) {
            Some(c) if c[3] > 0.0 => {
                let q = |k: usize| ((c[k] / c[3]).clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgba([q(0), q(1), q(2), 255])
            }
            _ => Rgba([160, 160, 160, 255]),
        };
        img.put_pixel(x.min(size - 1), y.min(size - 1), px);
    }
    img
}

async fn splom(State(st): State<Arc<AppState>>, Path((id, a, b)): Path<(String, usize, usize)>, Query(q): Query<SplomQuery>) -> ApiResult<Response> {
    let ds = st.dataset(&id)?;
    let m = ds.vol.attr_count();
    if a >= m || b >= m {
        return Err(bad_request(format!("attributes must be < {m}")));
    }
    if !(8..=2048).contains(&q.size) {
        return Err(bad_request("tile size must lie in [8, 2048]"));
    }
    let snap = ds.snapshot();
    let ready = snap.ready.clone().map_or_else(|| require_ready(&ds), Ok)?;
    let png = encode_png(&splom_tile(&ready.link, snap.covol.as_deref(), a, b, q.size))?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/png")), (header::HeaderName::from_static(TF_VERSION_HEADER), HeaderValue::from(snap.version))], png).into_response())
}
