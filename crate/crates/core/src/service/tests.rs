use std::f64::consts::PI;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use tower::ServiceExt;

use super::*;
use crate::assets::AssetLibrary;
use crate::embed::{build_index, StubEncoder};
use crate::model::{FloorEncoderConfig, ModelConfig, ModelMeta, SceneModel};
use crate::render::MaterialOverride;
use crate::scene::NormalizationBounds;
use crate::synthesizer::SynthesisOptions;
use crate::toyworld::generate_library;

fn engine(stop_bias: Option<f32>) -> Engine {
    let specs = generate_library(3, 4, 1).unwrap();
    let library = AssetLibrary::from_toy_specs(&specs).unwrap();
    let enc = StubEncoder::new();
    let index = build_index(&library, &enc, &ViewConfig::object_preset(24), &MaterialOverride::default()).unwrap();
    let cfg = ModelConfig {
        feature_dim: 16,
        query_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        mol_components: 3,
        pe_frequencies: 3,
        embed_proj_width: 8,
        head_hidden: 8,
        max_instances: 12,
        floor: FloorEncoderConfig {
            resolution: 16,
            width: 2,
            weights: None,
            seed: 1,
        },
        seed: 1,
    };
    let bounds = NormalizationBounds::new(
        [-3.0, 0.0, -3.0, 0.05, 0.05, 0.05, -PI],
        [3.0, 1.5, 3.0, 1.0, 1.0, 1.0, PI],
    )
    .unwrap();
    let mut model = SceneModel::new(cfg, bounds, ModelMeta::default()).unwrap();
    if let Some(b) = stop_bias {
        let w = model.params().id("head.stop.l2.w").unwrap();
        model.params_mut().get_mut(w).data.iter_mut().for_each(|x| *x = 0.0);
        let id = model.params().id("head.stop.l2.b").unwrap();
        model.params_mut().get_mut(id).data = vec![-b, b];
    }
    Engine {
        model: Arc::new(model),
        index: Arc::new(index),
        library: Arc::new(library),
        encoder: Arc::new(enc),
        options: SynthesisOptions {
            max_new: 4,
            ..Default::default()
        },
    }
}

fn app(stop_bias: Option<f32>, data_dir: Option<PathBuf>) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(engine(stop_bias), data_dir, 32).unwrap());
    (router(state.clone()), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn as_json(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

const FLOOR: &str = r#"{"floor": {"polygon": [[-2,-1.5],[2,-1.5],[2,1.5],[-2,1.5]], "resolution": 16}, "room_type": "toy"}"#;

async fn create(app: &Router) -> String {
    let (st, body) = call(app, "POST", "/sessions", FLOOR).await;
    assert_eq!(st, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    as_json(&body)["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn session_creation() {
    let (app, _) = app(None, None);
    let a = create(&app).await;
    let b = create(&app).await;
    assert_ne!(a, b);
    assert_eq!(call(&app, "POST", "/sessions", "{not json").await.0, StatusCode::BAD_REQUEST);
    let unknown = FLOOR.replace("\"toy\"", "\"garage\"");
    assert_eq!(call(&app, "POST", "/sessions", &unknown).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", "/sessions", "{}").await.0, StatusCode::BAD_REQUEST);
    let degenerate = r#"{"floor": {"polygon": [[0,0],[1,0],[2,0]]}, "room_type": "toy"}"#;
    assert_eq!(call(&app, "POST", "/sessions", degenerate).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/sessions/nope", "").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stop_model_leaves_scene_unchanged() {
    let (app, _) = app(Some(50.0), None);
    let id = create(&app).await;
    let (st, body) = call(&app, "POST", &format!("/sessions/{id}/generate"), r#"{"seed": 3}"#).await;
    assert_eq!(st, StatusCode::OK);
    let v = as_json(&body);
    assert_eq!(v["scene"]["instances"].as_array().unwrap().len(), 0);
    assert_eq!(v["trace"]["steps"].as_array().unwrap().len(), 1);
    assert_eq!(v["seed"], 3);
}

#[tokio::test]
async fn generation_is_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(Some(-50.0), Some(dir.path().to_path_buf()));
    let a = create(&app).await;
    let b = create(&app).await;
    let req = r#"{"prompt": "red box", "w0": 0.5, "seed": 11}"#;
    let ra = call(&app, "POST", &format!("/sessions/{a}/generate"), req).await;
    let rb = call(&app, "POST", &format!("/sessions/{b}/generate"), req).await;
    assert_eq!(ra.0, StatusCode::OK);
    assert_eq!(ra.1, rb.1);
    let scene = as_json(&ra.1)["scene"].clone();
    let n = scene["instances"].as_array().unwrap().len();
    assert!(n > 0);
    let first = scene["instances"][0]["id"].as_str().unwrap().to_string();

    let missing = r#"{"instance_id": "ghost", "prompt": "blue"}"#;
    assert_eq!(call(&app, "POST", &format!("/sessions/{a}/replace"), missing).await.0, StatusCode::NOT_FOUND);
    let rep = format!(r#"{{"instance_id": "{first}", "prompt": "blue cylinder", "seed": 5}}"#);
    let (st, body) = call(&app, "POST", &format!("/sessions/{a}/replace"), &rep).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(as_json(&body)["scene"]["instances"].as_array().unwrap().len(), n);

    let (_, generated) = call(&app, "POST", &format!("/sessions/{a}/generate"), "").await;
    assert!(as_json(&generated)["seed"].is_u64());

    let session = state.slot(&a).unwrap().snapshot();
    assert_eq!(session.history.len(), 3);
    let replayed = state.engine.replay(&session.initial, &session.history).unwrap();
    assert_eq!(
        serde_json::to_string(&replayed).unwrap(),
        serde_json::to_string(&session.scene).unwrap()
    );

    // a restarted service picks the sessions back up
    let restored = AppState::new(engine(Some(-50.0)), Some(dir.path().to_path_buf()), 32).unwrap();
    assert_eq!(restored.slot(&a).unwrap().snapshot(), session);
    assert_eq!(restored.slot(&b).unwrap().snapshot().history.len(), 1);
}

#[tokio::test]
async fn busy_session_conflicts() {
    let (app, state) = app(None, None);
    let id = create(&app).await;
    let slot = state.slot(&id).unwrap();
    let guard = slot.claim().unwrap();
    assert_eq!(
        call(&app, "POST", &format!("/sessions/{id}/generate"), r#"{"seed": 1}"#).await.0,
        StatusCode::CONFLICT
    );
    // reads still go through
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}"), "").await.0, StatusCode::OK);
    drop(guard);
    assert_eq!(
        call(&app, "POST", &format!("/sessions/{id}/generate"), r#"{"seed": 1}"#).await.0,
        StatusCode::OK
    );
}

#[tokio::test]
async fn render_views() {
    let (app, _) = app(None, None);
    let id = create(&app).await;
    let (st, png) = call(&app, "GET", &format!("/sessions/{id}/render?view=3"), "").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}/render?view=9"), "").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}/render?view=x"), "").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/sessions/none/render?view=0", "").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn asset_search() {
    let (app, state) = app(None, None);
    let (st, body) = call(&app, "GET", "/assets/search?q=green%20cylinder&k=3", "").await;
    assert_eq!(st, StatusCode::OK);
    let results = as_json(&body)["results"].as_array().unwrap().clone();
    assert_eq!(results.len(), 3);
    let top = results[0]["asset_id"].as_str().unwrap();
    assert!(top.starts_with("toy-cylinder-"), "{top}");
    let scores: Vec<f64> = results.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let (_, body) = call(&app, "GET", "/assets/search?q=red&k=1000", "").await;
    assert_eq!(as_json(&body)["results"].as_array().unwrap().len(), state.engine.index.len());
}
