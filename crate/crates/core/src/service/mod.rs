//! HTTP/JSON service over the synthesizer: sessions, generation, replacement,
//! previews and asset search.

pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use session::{Engine, Event, Operation, Session};

use crate::embed::embed_text;
use crate::error::Error;
use crate::evaluator::render_scene_view;
use crate::render::{ViewConfig, NUM_VIEWS};
use crate::scene::{FloorPlan, Point2, RoomType, Scene, DEFAULT_FLOOR_EXTENT};
use crate::synthesizer::{SynthesisTrace, DEFAULT_DECAY, DEFAULT_W0};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_SEARCH_K: usize = 10;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Parse { .. } | Error::InvalidArgument(_) | Error::OutOfRange(_) | Error::Shape(_) | Error::Geometry(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::Generation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// One session behind a writer flag. Mutations that find the flag set get 409;
/// readers only take the lock for the duration of a clone.
struct Slot {
    busy: AtomicBool,
    session: RwLock<Session>,
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl Slot {
    fn claim(&self) -> ApiResult<BusyGuard<'_>> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| ApiError::new(StatusCode::CONFLICT, "session is being modified"))?;
        Ok(BusyGuard(&self.busy))
    }

    fn snapshot(&self) -> Session {
        self.session.read().expect("session lock poisoned").clone()
    }
}

pub struct AppState {
    engine: Engine,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    data_dir: Option<PathBuf>,
    view: ViewConfig,
}

impl AppState {
    /// Restores any sessions logged under `data_dir`.
    pub fn new(engine: Engine, data_dir: Option<PathBuf>, render_size: usize) -> crate::Result<Self> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &data_dir {
            for s in Session::load_all(dir)? {
                sessions.insert(
                    s.id.clone(),
                    Arc::new(Slot {
                        busy: AtomicBool::new(false),
                        session: RwLock::new(s),
                    }),
                );
            }
        }
        Ok(AppState {
            engine,
            sessions: RwLock::new(sessions),
            data_dir,
            view: ViewConfig::scene_preset(render_size),
        })
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/replace", post(replace))
        .route("/sessions/{id}/render", get(render_view))
        .route("/assets/search", get(search_assets))
        .with_state(state)
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("{}: {}", e.path(), e.inner())))
}

fn parse_optional<T: DeserializeOwned + Default>(body: &[u8]) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        parse_json(body)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FloorRequest {
    polygon: Vec<Point2>,
    #[serde(default)]
    resolution: Option<usize>,
    #[serde(default)]
    extent: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    #[serde(default)]
    scene: Option<Scene>,
    #[serde(default)]
    floor: Option<FloorRequest>,
    #[serde(default)]
    room_type: Option<String>,
}

fn room_type_field(v: &Value) -> Option<&str> {
    v.get("room_type")
        .or_else(|| v.get("scene").and_then(|s| s.get("room_type")))
        .and_then(Value::as_str)
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let raw: Value = parse_json(&body)?;
    if let Some(rt) = room_type_field(&raw) {
        if rt.parse::<RoomType>().is_err() {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown room type `{rt}`")));
        }
    }
    let req: CreateRequest = parse_json(&body)?;
    let scene = match (req.scene, req.floor) {
        (Some(scene), None) => {
            scene.validate()?;
            scene
        }
        (None, Some(floor)) => {
            let rt = req
                .room_type
                .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "room_type is required with a floor"))?;
            let room_type: RoomType = rt.parse()?;
            let plan = FloorPlan::from_polygon(
                floor.polygon,
                floor.resolution.unwrap_or(state.engine.model.config().floor.resolution),
                floor.extent.unwrap_or(DEFAULT_FLOOR_EXTENT),
            )?;
            Scene::new("session", room_type, plan)
        }
        _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "give exactly one of `scene` or `floor`")),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(id.clone(), scene);
    if let Some(dir) = &state.data_dir {
        session.persist_new(dir)?;
    }
    let body = json!({ "session_id": id, "scene": session.scene });
    state.sessions.write().expect("session map poisoned").insert(
        id,
        Arc::new(Slot {
            busy: AtomicBool::new(false),
            session: RwLock::new(session),
        }),
    );
    Ok((StatusCode::CREATED, Json(body)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = state.slot(&id)?.snapshot();
    Ok(Json(json!({ "session_id": s.id, "scene": s.scene, "history": s.history })))
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    prompt: Option<String>,
    w0: Option<f64>,
    decay: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GenerateResponse {
    scene: Scene,
    trace: SynthesisTrace,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplaceRequest {
    instance_id: String,
    prompt: String,
    seed: Option<u64>,
}

/// Runs `op` off the async runtime and commits the result.
async fn mutate(state: Arc<AppState>, id: String, op: Operation, seed: u64) -> ApiResult<(Scene, Option<SynthesisTrace>)> {
    let slot = state.slot(&id)?;
    tokio::task::spawn_blocking(move || {
        let _busy = slot.claim()?;
        let current = slot.snapshot().scene;
        if let Operation::Replace { instance_id, .. } = &op {
            if current.instance(instance_id).is_none() {
                return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown instance `{instance_id}`")));
            }
        }
        let (scene, trace) = state.engine.apply(&current, &op, seed)?;
        let event = Event {
            op,
            seed,
            timestamp_ms: session::now_ms(),
        };
        slot.session
            .write()
            .expect("session lock poisoned")
            .commit(event, scene.clone(), state.data_dir.as_deref())?;
        Ok((scene, trace))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn generate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<GenerateResponse>> {
    let req: GenerateRequest = parse_optional(&body)?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let op = Operation::Generate {
        prompt: req.prompt,
        w0: req.w0.unwrap_or(DEFAULT_W0),
        decay: req.decay.unwrap_or(DEFAULT_DECAY),
    };
    let (scene, trace) = mutate(state, id, op, seed).await?;
    Ok(Json(GenerateResponse {
        scene,
        trace: trace.unwrap_or_default(),
        seed,
    }))
}

async fn replace(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: ReplaceRequest = parse_json(&body)?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let op = Operation::Replace {
        instance_id: req.instance_id,
        prompt: req.prompt,
    };
    let (scene, _) = mutate(state, id, op, seed).await?;
    Ok(Json(json!({ "scene": scene, "seed": seed })))
}

#[derive(Deserialize)]
struct RenderQuery {
    view: Option<String>,
}

async fn render_view(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let view = match q.view.as_deref() {
        None => 0,
        Some(v) => v
            .parse::<usize>()
            .ok()
            .filter(|k| *k < NUM_VIEWS)
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("view must be in 0..{NUM_VIEWS}")))?,
    };
    let scene = state.slot(&id)?.snapshot().scene;
    let png = tokio::task::spawn_blocking(move || {
        render_scene_view(&scene, &state.engine.library, &state.view, view).and_then(|img| img.to_png())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
struct SearchQuery {
    q: String,
    k: Option<usize>,
}

async fn search_assets(State(state): State<Arc<AppState>>, Query(q): Query<SearchQuery>) -> ApiResult<Json<Value>> {
    let text = embed_text(&q.q, state.engine.encoder.as_ref())?;
    let hits = state.engine.index.search(text.as_slice(), q.k.unwrap_or(DEFAULT_SEARCH_K))?;
    Ok(Json(json!({ "query": q.q, "results": hits })))
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, port: u16) -> crate::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("tcp://{addr}"), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(format!("tcp://{addr}"), e))
}

#[cfg(test)]
mod tests;
