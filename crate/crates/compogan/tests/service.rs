mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use compogan::service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn full_state() -> Arc<AppState> {
    let model = common::tiny_model();
    let bank = common::tiny_bank(&model);
    AppState::new(Some(model), Some(bank))
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_owned())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

async fn session(st: &Arc<AppState>, seed: u64) -> Value {
    let (s, v) = call(st, "POST", "/sessions", Some(&json!({ "seed": seed }).to_string())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn health_model_and_directions() {
    let st = full_state();
    let (s, v) = call(&st, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({ "model_loaded": true, "bank_loaded": true }));

    let (s, v) = call(&st, "GET", "/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["num_classes"], 8);
    assert_eq!(v["resolution"], 16);

    let (s, v) = call(&st, "GET", "/directions", None).await;
    assert_eq!(s, StatusCode::OK);
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 16);
    assert!(entries.iter().all(|e| e["k"] == 3 && e["target"] == "style"));
}

#[tokio::test]
async fn missing_model_or_bank() {
    let st = AppState::new(None, None);
    let (s, v) = call(&st, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["model_loaded"], false);
    let (s, v) = call(&st, "GET", "/model", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{v}");
    let (s, _) = call(&st, "POST", "/sessions", Some("{}")).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, v) = call(&st, "GET", "/directions", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(code(&v), "no_bank");

    // a model without a bank cannot edit
    let st = AppState::new(Some(common::tiny_model()), None);
    let id = session(&st, 1).await["session_id"].as_str().unwrap().to_owned();
    let (s, v) = call(&st, "POST", &format!("/sessions/{id}/edit"), Some(r#"{"class":0,"layer":5,"component":0,"magnitude":1}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
}

#[tokio::test]
async fn bad_requests() {
    let st = full_state();
    let (s, v) = call(&st, "POST", "/sessions", Some("{\"seed\": \"x\"}")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "seed");
    let (s, _) = call(&st, "POST", "/sessions", Some("not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, "POST", "/sessions", Some(r#"{"sead": 1}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let id = session(&st, 3).await["session_id"].as_str().unwrap().to_owned();
    let edit = format!("/sessions/{id}/edit");
    let (s, v) = call(&st, "POST", &edit, Some(r#"{"class":0,"layer":5,"component":0}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"]["message"].as_str().unwrap().contains("magnitude"), "{v}");
    let (s, v) = call(&st, "POST", &edit, Some(r#"{"class":0,"layer":5,"component":0,"magnitude":1,"mode":"mul"}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");

    for body in [
        r#"{"class":9,"layer":5,"component":0,"magnitude":1}"#,
        r#"{"class":0,"layer":6,"component":0,"magnitude":1}"#,
        r#"{"class":0,"layer":5,"component":3,"magnitude":1}"#,
    ] {
        let (s, v) = call(&st, "POST", &edit, Some(body)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(code(&v), "unknown_direction");
    }

    let (s, v) = call(&st, "POST", "/sessions/nope/edit", Some(r#"{"class":0,"layer":5,"component":0,"magnitude":1}"#)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(code(&v), "unknown_session");
    let (s, _) = call(&st, "GET", "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&st, "POST", "/sessions/nope/reset", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&st, "GET", "/elsewhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(code(&v), "not_found");
}

#[tokio::test]
async fn same_seed_same_images() {
    let st = full_state();
    let a = session(&st, 42).await;
    let b = session(&st, 42).await;
    assert_ne!(a["session_id"], b["session_id"]);
    for k in ["image", "mask_overlay", "coarse_mask_overlay"] {
        assert_eq!(a[k], b[k], "{k}");
    }
    let c = session(&st, 43).await;
    assert_ne!(a["image"], c["image"]);
    let png = compogan::imageio::decode_png_base64(a["image"].as_str().unwrap()).unwrap();
    assert_eq!((png.width, png.height), (16, 16));
}

#[tokio::test]
async fn edit_then_undo_restores_baseline() {
    let st = full_state();
    let base = session(&st, 7).await;
    let id = base["session_id"].as_str().unwrap();
    let edit = format!("/sessions/{id}/edit");
    let (s, moved) = call(&st, "POST", &edit, Some(r#"{"class":1,"layer":5,"component":0,"magnitude":3.0}"#)).await;
    assert_eq!(s, StatusCode::OK, "{moved}");
    assert_ne!(moved["image"], base["image"]);
    assert_eq!(moved["edits"].as_array().unwrap().len(), 1);

    // replaying the session reproduces the edited image
    let (_, replay) = call(&st, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(replay["image"], moved["image"]);

    let (_, back) = call(&st, "POST", &edit, Some(r#"{"class":1,"layer":5,"component":0,"magnitude":-3.0}"#)).await;
    assert_eq!(back["image"], base["image"]);
    assert_eq!(back["mask_overlay"], base["mask_overlay"]);

    let (_, set) = call(&st, "POST", &edit, Some(r#"{"class":1,"layer":5,"component":0,"magnitude":3.0,"mode":"set"}"#)).await;
    assert_eq!(set["image"], moved["image"]);
    let (s, reset) = call(&st, "POST", &format!("/sessions/{id}/reset"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(reset["image"], base["image"]);
    assert!(reset["edits"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn texture_edit_keeps_coarse_mask() {
    let st = full_state();
    let base = session(&st, 11).await;
    let id = base["session_id"].as_str().unwrap();
    let (s, v) = call(&st, "POST", &format!("/sessions/{id}/edit"), Some(r#"{"class":2,"layer":9,"component":0,"magnitude":4.0}"#)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["coarse_mask_overlay"], base["coarse_mask_overlay"]);
    assert_ne!(v["image"], base["image"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_do_not_interfere() {
    let st = full_state();
    let expected = session(&st, 5).await;
    let mut handles = vec![];
    for i in 0..8u64 {
        let st = st.clone();
        handles.push(tokio::spawn(async move {
            let v = session(&st, 5).await;
            let id = v["session_id"].as_str().unwrap().to_owned();
            let body = json!({ "class": i % 4, "layer": 5, "component": 0, "magnitude": 1.0 + i as f64 }).to_string();
            let (s, _) = call(&st, "POST", &format!("/sessions/{id}/edit"), Some(&body)).await;
            assert_eq!(s, StatusCode::OK);
            let (_, back) = call(&st, "POST", &format!("/sessions/{id}/reset"), None).await;
            back["image"].clone()
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), expected["image"]);
    }
}
