//! HTTP API over the pipeline.
//!
//! Scenes live under `{artifact_root}/scenes/{scene_id}` with the same layout
//! the CLI writes to its output directory. Long-running stages are jobs;
//! their outputs are stored in the content-addressed artifact store and
//! linked to the scene.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::identity::TrainConfig;
use crate::jobs::{Job, JobKind, JobQueue, Runner};
use crate::pipeline::{write_artifacts, Artifact, Pipeline, SceneState};
use crate::raster;
use crate::scene::{
    deserialize_scene, save_scene, validate_scene, ObjectAnnotation, ObjectId, RenderConfig,
    Resolution, SceneDocument, SceneSpec, ValidationReport, DEFAULT_SKETCH_PATH,
};
use crate::store::{sha256_hex, write_atomic, ArtifactRef, ArtifactStore};

const REVISION_FILE: &str = "revision.json";
const EVENT_WAIT_LIMIT_MS: u64 = 30_000;

#[derive(Debug, Clone)]
struct SceneEntry {
    state: SceneState,
    revision: u64,
}

/// State shared between request handlers and job workers.
struct Core {
    pipeline: Pipeline,
    store: ArtifactStore,
    scenes_dir: PathBuf,
    scenes: Mutex<BTreeMap<String, SceneEntry>>,
}

impl Core {
    fn workspace(&self, scene_id: &str) -> PathBuf {
        self.scenes_dir.join(scene_id)
    }

    fn save_entry(&self, entry: &SceneEntry) -> Result<()> {
        let dir = self.workspace(&entry.state.spec.scene_id.0);
        save_scene(&entry.state.spec, &dir)?;
        write_atomic(
            &dir.join(REVISION_FILE),
            &serde_json::to_vec(&json!({ "revision": entry.revision }))?,
        )
    }

    fn load_all(&self) -> Result<()> {
        let Ok(read) = std::fs::read_dir(&self.scenes_dir) else {
            return Ok(());
        };
        let mut scenes = self.scenes.lock().unwrap();
        for dirent in read.flatten() {
            let dir = dirent.path();
            let doc = dir.join("scene.json");
            if !doc.exists() {
                continue;
            }
            let state = SceneState::load(&doc, &dir)?;
            let revision = std::fs::read(dir.join(REVISION_FILE))
                .ok()
                .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
                .and_then(|v| v["revision"].as_u64())
                .unwrap_or(1);
            scenes.insert(state.spec.scene_id.0.clone(), SceneEntry { state, revision });
        }
        Ok(())
    }

    fn snapshot(&self, scene_id: &str) -> Result<SceneEntry> {
        self.scenes
            .lock()
            .unwrap()
            .get(scene_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("scene {scene_id}")))
    }

    /// Stores artifacts, mirrors them into the scene workspace and links them.
    fn publish(&self, scene_id: &str, artifacts: &[Artifact]) -> Result<Vec<ArtifactRef>> {
        write_artifacts(&self.workspace(scene_id), artifacts)?;
        let refs = artifacts
            .iter()
            .map(|a| self.store.put(&a.name, &a.bytes, a.media_type))
            .collect::<Result<Vec<_>>>()?;
        self.store.link(scene_id, &refs)?;
        Ok(refs)
    }

    /// Writes stage results back unless the annotations changed meanwhile.
    fn commit(&self, scene_id: &str, base_revision: u64, state: SceneState) -> Result<()> {
        let mut scenes = self.scenes.lock().unwrap();
        let entry = scenes
            .get_mut(scene_id)
            .ok_or_else(|| Error::NotFound(format!("scene {scene_id}")))?;
        if entry.revision != base_revision {
            return Err(Error::Validation(format!(
                "scene {scene_id} changed from revision {base_revision} to {} while the job ran",
                entry.revision
            )));
        }
        entry.state.assets = state.assets;
        entry.state.embeddings = state.embeddings;
        Ok(())
    }

    fn run_job(&self, job: &Job, progress: &mut dyn FnMut(crate::pipeline::ProgressEvent)) -> Result<Vec<ArtifactRef>> {
        let entry = self.snapshot(&job.scene_id)?;
        let mut state = entry.state;
        let p = &self.pipeline;
        let artifacts = match job.kind {
            JobKind::GenerateObject => {
                let req: GenerateRequest = serde_json::from_value(job.params.clone())?;
                let oid = ObjectId(req.object_id.unwrap_or_default());
                p.generate(&mut state, req.seed, Some(&oid))?
            }
            JobKind::TrainIdentities => {
                let cfg: TrainConfig = serde_json::from_value(job.params.clone())?;
                p.train(&mut state, &cfg, progress)?
            }
            JobKind::Compose => p.compose(&state)?.1,
            JobKind::Render => {
                let cfg: RenderConfig = serde_json::from_value(job.params.clone())?;
                p.render(&mut state, &cfg, progress)?.artifacts
            }
            JobKind::AlphaSweep => {
                let req: SweepJob = serde_json::from_value(job.params.clone())?;
                p.sweep(&mut state, &req.base, &req.alphas, progress)?.artifacts
            }
        };
        self.commit(&job.scene_id, entry.revision, state)?;
        self.publish(&job.scene_id, &artifacts)
    }
}

#[derive(Debug, Clone, Serialize)]
struct CachedResponse {
    status: u16,
    body: Value,
}

pub struct Service {
    core: Arc<Core>,
    queue: JobQueue,
    idempotency: Mutex<HashMap<String, CachedResponse>>,
}

impl Service {
    pub fn new(config: &Config) -> Result<Arc<Self>> {
        let pipeline = config.build_pipeline()?;
        Self::with_pipeline(pipeline, &config.artifact_root, config.pool_size)
    }

    pub fn with_pipeline(pipeline: Pipeline, root: &Path, pool_size: usize) -> Result<Arc<Self>> {
        let core = Arc::new(Core {
            pipeline,
            store: ArtifactStore::open(root.join("store"))?,
            scenes_dir: root.join("scenes"),
            scenes: Mutex::new(BTreeMap::new()),
        });
        core.load_all()?;
        let worker_core = Arc::clone(&core);
        let runner: Arc<Runner> = Arc::new(move |job, progress| worker_core.run_job(job, progress));
        let queue = JobQueue::open(Some(root.join("jobs.json")), pool_size, runner)?;
        Ok(Arc::new(Self {
            core,
            queue,
            idempotency: Mutex::new(HashMap::new()),
        }))
    }

    pub fn queue(&self) -> &JobQueue {
        &self.queue
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.core.store
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/scenes", post(create_scene))
        .route("/scenes/{id}", get(get_scene))
        .route("/scenes/{id}/objects/{oid}", put(update_object))
        .route("/scenes/{id}/objects/{oid}/generate", post(generate_object))
        .route("/scenes/{id}/identities/train", post(train_identities))
        .route("/scenes/{id}/render", post(render))
        .route("/scenes/{id}/sweep", post(sweep))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(job_events))
        .route("/artifacts/{hash}", get(get_artifact))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(service)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Connectivity(format!("cannot bind {addr}: {e}")))?;
    tracing::info!("listening on {}", addr);
    axum::serve(listener, router(service))
        .await
        .map_err(|e| Error::Connectivity(e.to_string()))
}

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn report(report: &ValidationReport) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": "scene validation failed", "report": report }),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Parse { .. } | Error::Version { .. } | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::Connectivity(_) | Error::ContractViolation(_) => StatusCode::BAD_GATEWAY,
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = std::result::Result<(StatusCode, Value), ApiError>;

fn respond(result: ApiResult) -> Response {
    match result {
        Ok((status, body)) => (status, Json(body)).into_response(),
        Err(e) => e.into_response(),
    }
}

/// Replays the stored response for a repeated idempotency key, otherwise
/// runs `f` and stores its response.
fn idempotent(
    service: &Service,
    headers: &HeaderMap,
    method: &Method,
    path: &str,
    f: impl FnOnce() -> ApiResult,
) -> Response {
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(|k| format!("{method} {path} {k}"));
    if let Some(k) = &key {
        if let Some(c) = service.idempotency.lock().unwrap().get(k) {
            let status = StatusCode::from_u16(c.status).unwrap_or(StatusCode::OK);
            return (status, Json(c.body.clone())).into_response();
        }
    }
    let (status, body) = match f() {
        Ok(ok) => ok,
        Err(e) => (e.status, e.body),
    };
    if let Some(k) = key {
        if !status.is_server_error() {
            service.idempotency.lock().unwrap().insert(
                k,
                CachedResponse {
                    status: status.as_u16(),
                    body: body.clone(),
                },
            );
        }
    }
    (status, Json(body)).into_response()
}

fn safe_id(kind: &str, id: &str) -> std::result::Result<(), ApiError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("{kind} {id:?} may only contain letters, digits, '-', '_' and '.'"),
        ))
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> std::result::Result<T, ApiError> {
    if body.is_empty() {
        return serde_json::from_slice(b"{}")
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))
}

fn scene_view(entry: &SceneEntry) -> Value {
    json!({
        "scene_id": entry.state.spec.scene_id,
        "revision": entry.revision,
        "document": entry.state.spec.to_document(),
        "assets": entry.state.assets.keys().collect::<Vec<_>>(),
        "embeddings": entry.state.embeddings.values().map(|e| &e.token).collect::<Vec<_>>(),
    })
}

#[derive(Deserialize)]
struct CreateScene {
    document: Value,
    sketch_png: String,
}

async fn create_scene(
    State(svc): State<Arc<Service>>,
    method: Method,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    idempotent(&svc, &headers, &method, "/scenes", || {
        let req: CreateScene = parse_body(&body)?;
        let doc: SceneDocument = deserialize_scene(&serde_json::to_vec(&req.document).map_err(Error::from)?)?;
        safe_id("scene id", &doc.scene_id.0)?;
        for o in &doc.objects {
            safe_id("object id", &o.object_id.0)?;
        }
        let png = base64::engine::general_purpose::STANDARD
            .decode(req.sketch_png.trim())
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("sketch_png: {e}")))?;
        let sketch = raster::decode_png_gray(&png)?;
        let mut spec = SceneSpec::from_document(doc, sketch);
        spec.sketch_path = DEFAULT_SKETCH_PATH.into();
        let report = validate_scene(&spec);
        if !report.is_empty() {
            return Err(ApiError::report(&report));
        }
        let id = spec.scene_id.0.clone();
        let mut scenes = svc.core.scenes.lock().unwrap();
        if scenes.contains_key(&id) {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("scene {id} already exists")));
        }
        let entry = SceneEntry {
            state: SceneState::new(spec),
            revision: 1,
        };
        svc.core.save_entry(&entry)?;
        let view = scene_view(&entry);
        scenes.insert(id, entry);
        Ok((StatusCode::CREATED, view))
    })
}

async fn get_scene(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Response {
    respond(
        svc.core
            .snapshot(&id)
            .map(|e| (StatusCode::OK, scene_view(&e)))
            .map_err(ApiError::from),
    )
}

#[derive(Deserialize)]
struct UpdateObject {
    revision: u64,
    annotation: ObjectAnnotation,
}

async fn update_object(
    State(svc): State<Arc<Service>>,
    UrlPath((id, oid)): UrlPath<(String, String)>,
    method: Method,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let path = format!("/scenes/{id}/objects/{oid}");
    idempotent(&svc, &headers, &method, &path, || {
        let req: UpdateObject = parse_body(&body)?;
        safe_id("object id", &oid)?;
        if req.annotation.object_id.0 != oid {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("annotation names {} but the URL names {oid}", req.annotation.object_id),
            ));
        }
        let mut scenes = svc.core.scenes.lock().unwrap();
        let entry = scenes
            .get_mut(&id)
            .ok_or_else(|| Error::NotFound(format!("scene {id}")))?;
        if req.revision != entry.revision {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: json!({
                    "error": "revision conflict",
                    "expected": entry.revision,
                    "found": req.revision,
                }),
            });
        }
        let mut spec = entry.state.spec.clone();
        let oid = ObjectId(oid);
        match spec.objects.iter_mut().find(|o| o.object_id == oid) {
            Some(o) => *o = req.annotation,
            None => spec.objects.push(req.annotation),
        }
        let report = validate_scene(&spec);
        if !report.is_empty() {
            return Err(ApiError::report(&report));
        }
        let mut updated = entry.clone();
        updated.state.spec = spec;
        updated.state.assets.remove(&oid);
        updated.state.embeddings.remove(&oid);
        updated.revision += 1;
        svc.core.save_entry(&updated)?;
        *entry = updated;
        Ok((StatusCode::OK, scene_view(entry)))
    })
}

fn submit(svc: &Service, scene: &SceneEntry, kind: JobKind, params: Value) -> ApiResult {
    let report = validate_scene(&scene.state.spec);
    if !report.is_empty() {
        return Err(ApiError::report(&report));
    }
    let doc = serde_json::to_vec(&scene.state.spec.to_document()).map_err(Error::from)?;
    let inputs = serde_json::to_vec(&json!({
        "revision": scene.revision,
        "document_sha256": sha256_hex(&doc),
        "kind": kind,
        "params": params,
    }))
    .map_err(Error::from)?;
    let job = svc
        .queue
        .submit(&scene.state.spec.scene_id.0, kind, params, sha256_hex(&inputs));
    Ok((StatusCode::ACCEPTED, serde_json::to_value(job).map_err(Error::from)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerateRequest {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    object_id: Option<String>,
}

async fn generate_object(
    State(svc): State<Arc<Service>>,
    UrlPath((id, oid)): UrlPath<(String, String)>,
    method: Method,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let path = format!("/scenes/{id}/objects/{oid}/generate");
    idempotent(&svc, &headers, &method, &path, || {
        let mut req: GenerateRequest = parse_body(&body)?;
        let scene = svc.core.snapshot(&id)?;
        if scene.state.spec.object(&ObjectId(oid.clone())).is_none() {
            return Err(Error::NotFound(format!("object {oid} in scene {id}")).into());
        }
        req.object_id = Some(oid);
        submit(&svc, &scene, JobKind::GenerateObject, json!(req))
    })
}

async fn train_identities(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    method: Method,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let path = format!("/scenes/{id}/identities/train");
    idempotent(&svc, &headers, &method, &path, || {
        let cfg: TrainConfig = parse_body(&body)?;
        cfg.validate()?;
        let scene = svc.core.snapshot(&id)?;
        submit(&svc, &scene, JobKind::TrainIdentities, json!(cfg))
    })
}

/// Render parameters; anything omitted takes the config default, and the
/// resolution defaults to the scene canvas.
#[derive(Debug, Default, Deserialize)]
struct RenderRequest {
    alpha: Option<f64>,
    seed: Option<u64>,
    #[serde(alias = "T")]
    steps: Option<usize>,
    resolution: Option<Resolution>,
    global_prompt: Option<String>,
    background_prompt: Option<String>,
    guidance_scale: Option<f64>,
}

impl RenderRequest {
    fn config(self, spec: &SceneSpec) -> RenderConfig {
        let d = RenderConfig::default();
        RenderConfig {
            steps: self.steps.unwrap_or(d.steps),
            alpha: self.alpha.unwrap_or(d.alpha),
            seed: self.seed.unwrap_or(d.seed),
            resolution: self.resolution.unwrap_or(spec.canvas.into()),
            global_prompt: self.global_prompt,
            background_prompt: self.background_prompt,
            guidance_scale: self.guidance_scale.unwrap_or(d.guidance_scale),
        }
    }
}

fn check_config(cfg: &RenderConfig, factor: u32) -> std::result::Result<(), ApiError> {
    let violations = cfg.violations(factor);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({
                "error": "render config validation failed",
                "violations": violations,
            }),
        })
    }
}

async fn render(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    method: Method,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let path = format!("/scenes/{id}/render");
    idempotent(&svc, &headers, &method, &path, || {
        let req: RenderRequest = parse_body(&body)?;
        let scene = svc.core.snapshot(&id)?;
        let cfg = req.config(&scene.state.spec);
        check_config(&cfg, svc.core.pipeline.factor())?;
        submit(&svc, &scene, JobKind::Render, json!(cfg))
    })
}

#[derive(Debug, Deserialize)]
struct SweepRequest {
    alphas: Vec<f64>,
    #[serde(flatten)]
    render: RenderRequest,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepJob {
    base: RenderConfig,
    alphas: Vec<f64>,
}

async fn sweep(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    method: Method,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let path = format!("/scenes/{id}/sweep");
    idempotent(&svc, &headers, &method, &path, || {
        let req: SweepRequest = parse_body(&body)?;
        if req.alphas.is_empty() {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "alphas must not be empty"));
        }
        let scene = svc.core.snapshot(&id)?;
        let base = req.render.config(&scene.state.spec);
        for &alpha in &req.alphas {
            check_config(&RenderConfig { alpha, ..base.clone() }, svc.core.pipeline.factor())?;
        }
        submit(
            &svc,
            &scene,
            JobKind::AlphaSweep,
            json!(SweepJob {
                base,
                alphas: req.alphas
            }),
        )
    })
}

async fn get_job(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Response {
    match svc.queue.get(&id) {
        Some(job) => (StatusCode::OK, Json(job)).into_response(),
        None => ApiError::new(StatusCode::NOT_FOUND, format!("job {id}")).into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: usize,
    #[serde(default)]
    wait_ms: u64,
}

/// Long-poll: returns progress records from `from` on as line-delimited JSON,
/// waiting up to `wait_ms` for the first new one.
async fn job_events(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
) -> Response {
    let wait = Duration::from_millis(q.wait_ms.min(EVENT_WAIT_LIMIT_MS));
    let svc2 = Arc::clone(&svc);
    let id2 = id.clone();
    let result = tokio::task::spawn_blocking(move || svc2.queue.events_since(&id2, q.from, wait)).await;
    match result {
        Ok(Some((events, job))) => {
            let mut body = String::new();
            for e in &events {
                body.push_str(&serde_json::to_string(e).expect("progress records serialize"));
                body.push('\n');
            }
            (
                StatusCode::OK,
                [
                    (header::CONTENT_TYPE, "application/x-ndjson".to_owned()),
                    (
                        header::HeaderName::from_static("x-job-status"),
                        serde_json::to_value(job.status)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_owned))
                            .unwrap_or_default(),
                    ),
                    (
                        header::HeaderName::from_static("x-next-from"),
                        (q.from + events.len()).to_string(),
                    ),
                ],
                body,
            )
                .into_response()
        }
        Ok(None) => ApiError::new(StatusCode::NOT_FOUND, format!("job {id}")).into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn get_artifact(State(svc): State<Arc<Service>>, UrlPath(hash): UrlPath<String>) -> Response {
    match svc.core.store.get(&hash) {
        Ok((bytes, media_type)) => (StatusCode::OK, [(header::CONTENT_TYPE, media_type)], bytes).into_response(),
        Err(e) => ApiError::from(e).into_response(),
    }
}
