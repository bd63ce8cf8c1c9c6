use std::io::Cursor;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use fdrn_core::{DType, Device, FdrnModel, InteractionConfig, ModelConfig};
use fdrn_service::{png1, rle, AppState, Rle, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> Arc<FdrnModel> {
    Arc::new(FdrnModel::new(&ModelConfig::tiny(), 3, DType::F32, &Device::Cpu).unwrap())
}

fn app_with(model: Arc<FdrnModel>, config: ServiceConfig) -> (Arc<AppState>, Router) {
    let state = AppState::new(model, InteractionConfig::default(), config);
    (state.clone(), fdrn_service::router(state))
}

fn app() -> (Arc<AppState>, Router) {
    app_with(model(), ServiceConfig::default())
}

fn png_b64(w: u32, h: u32, seed: u32) -> String {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let inside = (x as i32 - 20).pow(2) + (y as i32 - 18).pow(2) < 120;
        let v = ((x * 7 + y * 13 + seed) % 40) as u8;
        if inside { image::Rgb([200 + v / 2, 40, 40]) } else { image::Rgb([v, 90 + v, 120]) }
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn open(app: &Router, seed: u32) -> String {
    let (s, v) = call_json(app, Method::POST, "/sessions", Some(json!({"image": png_b64(48, 40, seed)}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn click(app: &Router, id: &str, x: i64, y: i64, pol: &str) -> (StatusCode, Value) {
    call_json(app, Method::POST, &format!("/sessions/{id}/clicks"), Some(json!({"x": x, "y": y, "polarity": pol}))).await
}

fn rle_of(v: &Value) -> Rle {
    serde_json::from_value(v.clone()).unwrap()
}

#[tokio::test]
async fn open_reports_stage_one_and_dimensions() {
    let (state, app) = app();
    let (s, v) = call_json(&app, Method::POST, "/sessions", Some(json!({"image": png_b64(48, 40, 0)}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(48), Some(40)));
    assert!(v["t_f1_ms"].as_f64().unwrap() > 0.0);
    let other = open(&app, 0).await;
    assert_ne!(v["session_id"].as_str().unwrap(), other);
    assert_eq!(state.session_count(), 2);
}

#[tokio::test]
async fn undecodable_payloads_create_nothing() {
    let (state, app) = app();
    let garbage = base64::engine::general_purpose::STANDARD.encode(b"definitely not an image");
    let (s, v) = call_json(&app, Method::POST, "/sessions", Some(json!({"image": garbage}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");
    let (s, _) = call_json(&app, Method::POST, "/sessions", Some(json!({"image": "%%%"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test]
async fn oversized_images_are_rejected() {
    let (state, app) = app_with(model(), ServiceConfig { max_image_side: 40, ..Default::default() });
    let (s, _) = call_json(&app, Method::POST, "/sessions", Some(json!({"image": png_b64(48, 40, 0)}))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test]
async fn unknown_sessions_are_not_found() {
    let (_, app) = app();
    let (s, _) = click(&app, "nope", 1, 1, "positive").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    for (m, uri) in [
        (Method::POST, "/sessions/nope/undo"),
        (Method::GET, "/sessions/nope/mask"),
        (Method::GET, "/sessions/nope"),
        (Method::DELETE, "/sessions/nope"),
    ] {
        assert_eq!(call(&app, m, uri, None).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn export_before_any_click_conflicts() {
    let (_, app) = app();
    let id = open(&app, 0).await;
    let (s, v) = call_json(&app, Method::GET, &format!("/sessions/{id}/mask?format=rle"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");
    assert_eq!(call(&app, Method::GET, &format!("/sessions/{id}/mask?format=png"), None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn out_of_bounds_click_leaves_state_unchanged() {
    let (_, app) = app();
    let id = open(&app, 0).await;
    click(&app, &id, 20, 18, "positive").await;
    let (_, before) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let (_, mask_before) = call(&app, Method::GET, &format!("/sessions/{id}/mask"), None).await;
    for (x, y) in [(48, 0), (0, 40), (-1, 3), (100, 100)] {
        let (s, v) = click(&app, &id, x, y, "negative").await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
        assert_eq!(v["error"], "validation");
    }
    let (_, after) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(before, after);
    assert_eq!(call(&app, Method::GET, &format!("/sessions/{id}/mask"), None).await.1, mask_before);
}

#[tokio::test]
async fn malformed_click_body_is_rejected() {
    let (_, app) = app();
    let id = open(&app, 0).await;
    let (s, _) = call(&app, Method::POST, &format!("/sessions/{id}/clicks"), Some(json!({"x": 1, "y": 2, "polarity": "maybe"}))).await;
    assert!(s.is_client_error());
    let (_, info) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(info["clicks"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn first_click_has_no_history() {
    let (_, app) = app();
    let id = open(&app, 0).await;
    let (s, v) = click(&app, &id, 20, 18, "positive").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["click"]["index"], 1);
    assert_eq!((v["click"]["row"].as_u64(), v["click"]["col"].as_u64()), (Some(18), Some(20)));
    assert!(v["iou_hint"].is_null());
    assert!(v["t_f2_ms"].as_f64().unwrap() > 0.0);
    let m = rle::decode(&rle_of(&v["mask_rle"])).unwrap();
    assert_eq!(m.dims(), (40, 48));
    assert_eq!(v["probability"]["foreground_pixels"].as_u64().unwrap() as usize, m.count());
    let (_, info) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(info["clicks"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn twenty_clicks_recycle_stage_one() {
    let m = model();
    let (_, app) = app_with(m.clone(), ServiceConfig::default());
    let id = open(&app, 1).await;
    for k in 0..20 {
        let pol = if k % 3 == 2 { "negative" } else { "positive" };
        let (s, _) = click(&app, &id, (5 + 2 * k) % 48, (3 + 5 * k) % 40, pol).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, info) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(info["t_f1_ms"].as_array().unwrap().len(), 1);
    assert_eq!(info["t_f2_ms"].as_array().unwrap().len(), 20);
    assert_eq!(m.stage1_calls(), 1);
    assert_eq!(m.stage2_calls(), 20);
}

#[tokio::test]
async fn undo_restores_previous_state() {
    let (_, app) = app();
    let id = open(&app, 2).await;
    let (_, v) = call_json(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(v["status"], "nothing_to_undo");
    assert_eq!(v["clicks"], 0);

    let (_, first) = click(&app, &id, 20, 18, "positive").await;
    let (_, info_before) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    click(&app, &id, 30, 30, "negative").await;
    let (_, v) = call_json(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(v["status"], "undone");
    assert_eq!(v["clicks"], 1);
    assert_eq!(v["mask_rle"], first["mask_rle"]);
    let (_, exported) = call_json(&app, Method::GET, &format!("/sessions/{id}/mask?format=rle"), None).await;
    assert_eq!(exported, first["mask_rle"]);
    let (_, info_after) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(info_before["clicks"], info_after["clicks"]);

    let (_, v) = call_json(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(v["status"], "undone");
    assert_eq!(rle::decode(&rle_of(&v["mask_rle"])).unwrap().count(), 0);
    assert_eq!(call(&app, Method::GET, &format!("/sessions/{id}/mask"), None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn replay_after_undo_is_deterministic() {
    let (_, app) = app();
    let id = open(&app, 3).await;
    click(&app, &id, 20, 18, "positive").await;
    let (_, b1) = click(&app, &id, 10, 30, "negative").await;
    call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    let (_, b2) = click(&app, &id, 10, 30, "negative").await;
    assert_eq!(b1["mask_rle"], b2["mask_rle"]);
    assert_eq!(b1["probability"], b2["probability"]);
    assert_eq!(b2["click"]["index"], 2);
}

#[tokio::test]
async fn png_export_matches_rle() {
    let (_, app) = app();
    let id = open(&app, 4).await;
    click(&app, &id, 20, 18, "positive").await;
    click(&app, &id, 40, 5, "positive").await;
    let (s, png_bytes) = call(&app, Method::GET, &format!("/sessions/{id}/mask?format=png"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = call_json(&app, Method::GET, &format!("/sessions/{id}/mask?format=rle"), None).await;
    let from_rle = rle::decode(&rle_of(&v)).unwrap();
    assert_eq!(png1::decode_png(&png_bytes).unwrap(), from_rle);
    assert_eq!(call(&app, Method::GET, &format!("/sessions/{id}/mask?format=gif"), None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn delete_removes_session() {
    let (state, app) = app();
    let id = open(&app, 0).await;
    assert_eq!(call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await.0, StatusCode::NO_CONTENT);
    assert_eq!(state.session_count(), 0);
    assert_eq!(click(&app, &id, 1, 1, "positive").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn idle_sessions_are_evicted() {
    let (state, app) = app_with(model(), ServiceConfig { ttl: Duration::from_millis(50), ..Default::default() });
    let id = open(&app, 0).await;
    assert_eq!(state.evict_idle(Instant::now()), 0);
    assert_eq!(state.evict_idle(Instant::now() + Duration::from_secs(1)), 1);
    assert_eq!(click(&app, &id, 1, 1, "positive").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_index_is_served() {
    let (_, app) = app();
    let (s, body) = call(&app, Method::GET, "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/sessions"));
}

fn script(k: usize) -> Vec<(i64, i64, &'static str)> {
    (0..5).map(|j| (((7 * k + 11 * j) % 48) as i64, ((5 * k + 3 * j) % 40) as i64, if j % 2 == 0 { "positive" } else { "negative" })).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_match_sequential_runs() {
    let (_, app) = app();
    let mut sequential = Vec::new();
    for k in 0..4 {
        let id = open(&app, k as u32).await;
        let mut masks = Vec::new();
        for (x, y, p) in script(k) {
            masks.push(click(&app, &id, x, y, p).await.1["mask_rle"].clone());
        }
        sequential.push(masks);
    }
    let mut ids = Vec::new();
    for k in 0..4 {
        ids.push(open(&app, k as u32).await);
    }
    let tasks: Vec<_> = ids
        .into_iter()
        .enumerate()
        .map(|(k, id)| {
            let app = app.clone();
            tokio::spawn(async move {
                let mut masks = Vec::new();
                for (x, y, p) in script(k) {
                    masks.push(click(&app, &id, x, y, p).await.1["mask_rle"].clone());
                }
                masks
            })
        })
        .collect();
    for (k, t) in tasks.into_iter().enumerate() {
        assert_eq!(t.await.unwrap(), sequential[k], "session {k}");
    }
}
