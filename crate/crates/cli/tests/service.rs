use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use styleres::editops::DirectionBank;
use styleres::encoders::{BaseEncoder, EncoderVariant, ResidualModules};
use styleres::models::{ModelConfig, Models};
use styleres::shapesdata::{png_bytes, sample_dataset};
use styleres::stylegen::Generator;
use styleres_cli::service::{router, AppState, DirectionInfo, LoadedModel, ServiceConfig};

fn tiny_model() -> LoadedModel {
    let cfg = ModelConfig::tiny();
    let mut m = Models::new(cfg.clone()).unwrap();
    m.g = Some(Generator::new(&cfg.generator, 1).unwrap());
    m.e0 = Some(BaseEncoder::new(&cfg.generator, &cfg.encoder, 2).unwrap());
    m.res = Some(ResidualModules::new(&cfg.generator, &cfg.encoder, EncoderVariant::Full, 3).unwrap());
    m.variant = Some(EncoderVariant::Full);
    LoadedModel::from_bundle(&m.to_bundle(json!({"stage": "styleres"})).unwrap()).unwrap()
}

fn bank() -> DirectionBank {
    let d = ModelConfig::tiny().generator.w_dim;
    let mut b = DirectionBank::default();
    let mut v = vec![0.0; d];
    v[0] = 1.0;
    b.insert("size", &v, "supervised", 0.97).unwrap();
    let u = vec![1.0 / (d as f64).sqrt(); d];
    b.insert("pc0", &u, "pca", 0.4).unwrap();
    b
}

fn app_with(cfg: ServiceConfig) -> (axum::Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(Some(tiny_model()), bank(), cfg));
    (router(state.clone()), state)
}

fn app() -> axum::Router {
    app_with(ServiceConfig::default()).0
}

fn sample_png(seed: u64) -> Vec<u8> {
    let r = ModelConfig::tiny().resolution();
    let (img, _) = sample_dataset(seed, 1, r).unwrap().remove(0);
    png_bytes(&img, 0).unwrap()
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body: {:?}", String::from_utf8_lossy(&bytes)));
    (status, body)
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).body(body.into()).unwrap()
}

fn post_json(uri: &str, v: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

async fn invert(app: &axum::Router, png: Vec<u8>) -> Value {
    let (status, body) = send(app, post("/invert", png)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body
}

fn decode(v: &Value) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD.decode(v.as_str().unwrap()).unwrap()
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap()
}

#[tokio::test]
async fn invert_returns_session_and_reconstruction() {
    let app = app();
    let body = invert(&app, sample_png(0)).await;
    assert!(body["recon_mse"].as_f64().unwrap().is_finite());
    let png = decode(&body["inversion_png_base64"]);
    assert_eq!(&png[1..4], b"PNG");
    let other = invert(&app, sample_png(1)).await;
    assert_ne!(body["session_id"], other["session_id"]);
}

#[tokio::test]
async fn zero_beta_edit_is_byte_identical_to_inversion() {
    let app = app();
    let inv = invert(&app, sample_png(3)).await;
    let (status, edit) = send(&app, post_json("/edit", json!({"session_id": inv["session_id"], "direction": "size", "beta": 0.0}))).await;
    assert_eq!(status, StatusCode::OK, "{edit}");
    assert_eq!(decode(&edit["edited_png_base64"]), decode(&inv["inversion_png_base64"]));
    assert!(edit["latency_ms"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn opposite_betas_differ_and_repeats_are_identical() {
    let app = app();
    let inv = invert(&app, sample_png(4)).await;
    let sid = inv["session_id"].clone();
    let mut images = Vec::new();
    for beta in [3.0, -3.0, 3.0] {
        let (status, e) = send(&app, post_json("/edit", json!({"session_id": sid, "direction": "pc0", "beta": beta}))).await;
        assert_eq!(status, StatusCode::OK, "{e}");
        images.push(decode(&e["edited_png_base64"]));
    }
    assert_ne!(images[0], images[1]);
    // Edits start from the stored code every time.
    assert_eq!(images[0], images[2]);
}

#[tokio::test]
async fn layer_restricted_edits_accept_spec_and_list() {
    let app = app();
    let inv = invert(&app, sample_png(5)).await;
    let sid = inv["session_id"].clone();
    let (s1, a) = send(&app, post_json("/edit", json!({"session_id": sid, "direction": "pc0", "beta": 3, "layers": "0-1"}))).await;
    let (s2, b) = send(&app, post_json("/edit", json!({"session_id": sid, "direction": "pc0", "beta": 3, "layers": [0, 1]}))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["edited_png_base64"], b["edited_png_base64"]);
    let (s, e) = send(&app, post_json("/edit", json!({"session_id": sid, "direction": "pc0", "beta": 3, "layers": [99]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&e), "invalid_layers");
}

#[tokio::test]
async fn malformed_and_oversized_uploads() {
    let (app, _) = app_with(ServiceConfig {
        max_upload_bytes: 64,
        ..ServiceConfig::default()
    });
    let (s, e) = send(&app, post("/invert", vec![7u8; 32])).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&e), "invalid_image");
    let (s, e) = send(&app, post("/invert", sample_png(0))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&e), "payload_too_large");
}

#[tokio::test]
async fn edit_errors_have_codes() {
    let app = app();
    let inv = invert(&app, sample_png(6)).await;
    let sid = inv["session_id"].clone();
    let cases = [
        (json!({"session_id": "nope", "direction": "size", "beta": 1}), StatusCode::NOT_FOUND, "unknown_session"),
        (json!({"session_id": sid, "direction": "smile", "beta": 1}), StatusCode::NOT_FOUND, "unknown_direction"),
        (json!({"session_id": sid, "direction": "size", "beta": "NaN"}), StatusCode::UNPROCESSABLE_ENTITY, "invalid_beta"),
        (json!({"session_id": sid, "direction": "size", "beta": "inf"}), StatusCode::UNPROCESSABLE_ENTITY, "invalid_beta"),
        (json!({"session_id": sid, "direction": "size"}), StatusCode::BAD_REQUEST, "invalid_request"),
    ];
    for (req, status, code) in cases {
        let (s, e) = send(&app, post_json("/edit", req.clone())).await;
        assert_eq!((s, error_code(&e)), (status, code), "{req}");
    }
    let (s, e) = send(&app, post("/edit", "{not json")).await;
    assert_eq!((s, error_code(&e)), (StatusCode::BAD_REQUEST, "invalid_request"));
}

#[tokio::test]
async fn sessions_expire_and_are_evicted() {
    let (app, state) = app_with(ServiceConfig {
        session_ttl: Duration::from_millis(100),
        max_sessions: 2,
        ..ServiceConfig::default()
    });
    let first = invert(&app, sample_png(7)).await;
    tokio::time::sleep(Duration::from_millis(250)).await;
    let (s, e) = send(&app, post_json("/edit", json!({"session_id": first["session_id"], "direction": "size", "beta": 1}))).await;
    assert_eq!((s, error_code(&e)), (StatusCode::NOT_FOUND, "session_expired"));

    let a = invert(&app, sample_png(8)).await;
    invert(&app, sample_png(9)).await;
    invert(&app, sample_png(10)).await;
    assert_eq!(state.session_count(), 2);
    let (s, e) = send(&app, post_json("/edit", json!({"session_id": a["session_id"], "direction": "size", "beta": 1}))).await;
    assert_eq!((s, error_code(&e)), (StatusCode::NOT_FOUND, "unknown_session"));
}

#[tokio::test]
async fn directions_are_sorted_and_match_the_bank() {
    let app = app();
    let (s, body) = send(&app, Request::get("/directions").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let list: Vec<DirectionInfo> = serde_json::from_value(body).unwrap();
    let names: Vec<&str> = list.iter().map(|d| d.name.as_str()).collect();
    let expected: Vec<String> = bank().iter().map(|(k, _)| k.clone()).collect();
    assert_eq!(names, expected);
    assert_eq!(names, ["pc0", "size"]);
    assert_eq!(list[1].method, "supervised");
    assert_eq!(list[1].suggested_beta_range, [-6.0, 6.0]);

    let empty = router(Arc::new(AppState::new(Some(tiny_model()), DirectionBank::default(), ServiceConfig::default())));
    let (s, body) = send(&empty, Request::get("/directions").body(Body::empty()).unwrap()).await;
    assert_eq!((s, body), (StatusCode::OK, json!([])));
}

#[tokio::test]
async fn health_reports_checkpoint_hash() {
    let model = tiny_model();
    let hash = model.checkpoint_hash.clone();
    let app = router(Arc::new(AppState::new(Some(model), bank(), ServiceConfig::default())));
    let (s, body) = send(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["checkpoint_hash"], hash);
    assert_eq!(hash.len(), 64);
}

#[tokio::test]
async fn without_a_model_inference_is_unavailable() {
    let app = router(Arc::new(AppState::new(None, bank(), ServiceConfig::default())));
    let (s, e) = send(&app, post("/invert", sample_png(0))).await;
    assert_eq!((s, error_code(&e)), (StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded"));
    let (s, body) = send(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["checkpoint_hash"], Value::Null);
}

#[tokio::test]
async fn unknown_routes_and_methods_answer_json() {
    let app = app();
    let (s, e) = send(&app, Request::get("/nope").body(Body::empty()).unwrap()).await;
    assert_eq!((s, error_code(&e)), (StatusCode::NOT_FOUND, "not_found"));
    let (s, e) = send(&app, Request::get("/invert").body(Body::empty()).unwrap()).await;
    assert_eq!((s, error_code(&e)), (StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed"));
}

#[tokio::test]
async fn cors_origin_is_echoed() {
    let (app, _) = app_with(ServiceConfig {
        cors_origin: Some("http://localhost:5173".into()),
        ..ServiceConfig::default()
    });
    let resp = app
        .oneshot(
            Request::get("/health")
                .header("origin", "http://localhost:5173")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

#[tokio::test]
async fn concurrent_requests_share_the_session_store() {
    let app = app();
    let handles: Vec<_> = (0..6)
        .map(|i| {
            let app = app.clone();
            tokio::spawn(async move { invert(&app, sample_png(20 + i)).await["session_id"].as_str().unwrap().to_string() })
        })
        .collect();
    let mut ids = Vec::new();
    for h in handles {
        ids.push(h.await.unwrap());
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 6);
}
