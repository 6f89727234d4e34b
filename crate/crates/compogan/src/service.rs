//! HTTP editing service.
//!
//! All inference runs on one dedicated worker thread that owns the model
//! and consumes a job queue; request handlers only validate input, update
//! the session store and wait for their job. Images are base64-encoded
//! PNGs. Every error body is `{"error": {"code", "message", "field"?}}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use compogan_core::explorer::{DirectionBank, EditSpec, StyleEdit};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::checkpoint::Model;
use crate::imageio::png_base64;
use crate::inference::render_seed;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), field: None }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            err["field"] = json!(f);
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn no_model() -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model checkpoint is loaded")
}

/// Parses a JSON body, naming the offending field on failure. An empty
/// body parses as `{}`.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ApiError { status: StatusCode::BAD_REQUEST, code: "invalid_body", message: e.into_inner().to_string(), field }
    })
}

/// Accumulated edit coordinates per `(class, layer)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Session {
    pub seed: u64,
    pub edits: BTreeMap<(usize, usize), Vec<f64>>,
}

impl Session {
    pub fn spec(&self) -> EditSpec {
        EditSpec {
            edits: self.edits.iter().map(|(&(class, layer), coords)| StyleEdit { class, layer, coords: coords.clone() }).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Rendered {
    pub image: String,
    pub mask_overlay: String,
    pub coarse_mask_overlay: String,
}

struct Job {
    seed: u64,
    spec: EditSpec,
    reply: oneshot::Sender<Result<Rendered, String>>,
}

fn spawn_worker(model: Arc<Model>, bank: Option<Arc<DirectionBank>>) -> mpsc::Sender<Job> {
    let (tx, rx) = mpsc::channel::<Job>();
    thread::Builder::new()
        .name("compogan-model".into())
        .spawn(move || {
            let palette = model.palette();
            for job in rx {
                let out = catch_unwind(AssertUnwindSafe(|| {
                    let r = render_seed(&model, job.seed, bank.as_deref(), &job.spec).map_err(|e| format!("{e:#}"))?;
                    Ok(Rendered {
                        image: png_base64(&r.image),
                        mask_overlay: png_base64(&r.mask_overlay(&palette)),
                        coarse_mask_overlay: png_base64(&r.coarse_overlay(&palette)),
                    })
                }))
                .unwrap_or_else(|_| Err("inference panicked".into()));
                let _ = job.reply.send(out);
            }
        })
        .expect("spawning the model worker");
    tx
}

pub struct AppState {
    model: Option<Arc<Model>>,
    bank: Option<Arc<DirectionBank>>,
    sessions: Mutex<HashMap<String, Session>>,
    worker: Option<Mutex<mpsc::Sender<Job>>>,
}

impl AppState {
    pub fn new(model: Option<Model>, bank: Option<DirectionBank>) -> Arc<Self> {
        let model = model.map(Arc::new);
        let bank = bank.map(Arc::new);
        let worker = model.as_ref().map(|m| Mutex::new(spawn_worker(m.clone(), bank.clone())));
        Arc::new(Self { model, bank, sessions: Mutex::new(HashMap::new()), worker })
    }

    async fn render(&self, seed: u64, spec: EditSpec) -> ApiResult<Rendered> {
        let worker = self.worker.as_ref().ok_or_else(no_model)?;
        let (reply, rx) = oneshot::channel();
        worker
            .lock()
            .expect("worker sender lock")
            .send(Job { seed, spec, reply })
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "worker_stopped", "the model worker has stopped"))?;
        rx.await
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_dropped", "the model worker dropped the request"))?
            .map_err(|m| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", m))
    }

    fn session(&self, id: &str) -> ApiResult<Session> {
        self.sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    seed: Option<u64>,
}

#[derive(Serialize)]
struct SessionResponse {
    session_id: String,
    seed: u64,
    edits: Vec<StyleEdit>,
    #[serde(flatten)]
    render: Rendered,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum EditMode {
    /// Add to the accumulated coordinate.
    #[default]
    Add,
    /// Replace the accumulated coordinate.
    Set,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    class: usize,
    layer: usize,
    component: usize,
    magnitude: f64,
    #[serde(default)]
    mode: EditMode,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SessionResponse>> {
    let req: CreateSession = parse_body(&body)?;
    if st.model.is_none() {
        return Err(no_model());
    }
    let seed = req.seed.unwrap_or_else(rand::random::<u64>);
    let render = st.render(seed, EditSpec::new()).await?;
    let id = format!("{:032x}", rand::random::<u128>());
    st.sessions.lock().expect("session lock").insert(id.clone(), Session { seed, edits: BTreeMap::new() });
    Ok(Json(SessionResponse { session_id: id, seed, edits: vec![], render }))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionResponse>> {
    let s = st.session(&id)?;
    let spec = s.spec();
    let render = st.render(s.seed, spec.clone()).await?;
    Ok(Json(SessionResponse { session_id: id, seed: s.seed, edits: spec.edits, render }))
}

async fn reset_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionResponse>> {
    let seed = {
        let mut sessions = st.sessions.lock().expect("session lock");
        let s = sessions.get_mut(&id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))?;
        s.edits.clear();
        s.seed
    };
    let render = st.render(seed, EditSpec::new()).await?;
    Ok(Json(SessionResponse { session_id: id, seed, edits: vec![], render }))
}

async fn edit_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SessionResponse>> {
    let req: EditRequest = parse_body(&body)?;
    if !req.magnitude.is_finite() {
        return Err(ApiError { field: Some("magnitude".into()), ..ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", "magnitude must be finite") });
    }
    if st.model.is_none() {
        return Err(no_model());
    }
    // Apply under the lock, render from the snapshot: concurrent edits on
    // one session serialize and replaying the stored state reproduces
    // every returned image.
    let session = {
        let mut sessions = st.sessions.lock().expect("session lock");
        let s = sessions.get_mut(&id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))?;
        let unknown = || {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unknown_direction",
                format!("no direction for class {}, layer {}, component {}", req.class, req.layer, req.component),
            )
        };
        let entry = st.bank.as_ref().and_then(|b| b.get(req.class, req.layer)).ok_or_else(unknown)?;
        if req.component >= entry.k() {
            return Err(unknown());
        }
        let coords = s.edits.entry((req.class, req.layer)).or_insert_with(|| vec![0.0; entry.k()]);
        match req.mode {
            EditMode::Add => coords[req.component] += req.magnitude,
            EditMode::Set => coords[req.component] = req.magnitude,
        }
        s.clone()
    };
    let spec = session.spec();
    let render = st.render(session.seed, spec.clone()).await?;
    Ok(Json(SessionResponse { session_id: id, seed: session.seed, edits: spec.edits, render }))
}

#[derive(Serialize)]
struct DirectionInfo {
    class: usize,
    class_name: String,
    layer: usize,
    target: &'static str,
    k: usize,
    variances: Vec<f64>,
}

async fn directions(State(st): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let bank = st.bank.as_ref().filter(|b| !b.is_empty()).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_bank", "no direction bank is loaded"))?;
    let names = st.model.as_ref().map(|m| m.class_names()).unwrap_or_default();
    let entries: Vec<DirectionInfo> = bank
        .entries()
        .iter()
        .map(|e| DirectionInfo {
            class: e.class,
            class_name: names.get(e.class).cloned().unwrap_or_else(|| format!("class{}", e.class)),
            layer: e.layer,
            target: e.target.name(),
            k: e.k(),
            variances: e.variances.clone(),
        })
        .collect();
    Ok(Json(json!({ "entries": entries })))
}

async fn model_info(State(st): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let m = st.model.as_ref().ok_or_else(no_model)?;
    Ok(Json(json!({
        "step": m.step,
        "num_classes": m.num_classes(),
        "class_names": m.class_names(),
        "palette": m.palette(),
        "resolution": m.config.generator.output_resolution,
    })))
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "model_loaded": st.model.is_some(), "bank_loaded": st.bank.as_ref().is_some_and(|b| !b.is_empty()) }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model_info))
        .route("/directions", get(directions))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edit", post(edit_session))
        .route("/sessions/{id}/reset", post(reset_session))
        .fallback(not_found)
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, on_ready: impl FnOnce(SocketAddr)) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_ready(listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
