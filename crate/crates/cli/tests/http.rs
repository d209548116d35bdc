use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use acwm::diffusion::TinyDenoiser;
use acwm::eval_harness::EpisodeConfig;
use acwm::image::RgbImage;
use acwm::learned::LearnedConfig;
use acwm::world::SceneConfig;
use acwm_cli::server::{router, AppState};

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    raw(app, req).await
}

async fn raw(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn app(dir: &std::path::Path) -> Router {
    router(AppState::new(dir, None, EpisodeConfig::default()).unwrap())
}

fn zero_chunk(k: usize) -> Value {
    let a = SceneConfig::default().gripper_start.to_vector();
    json!({"actions": vec![a.to_vec(); k]})
}

fn moving_chunk(k: usize, dz: f64) -> Value {
    let a = SceneConfig::default().gripper_start.to_vector();
    let rows: Vec<Vec<f64>> = (1..=k)
        .map(|i| {
            let mut r = a.to_vec();
            r[2] += dz * i as f64 / k as f64;
            r
        })
        .collect();
    json!({"actions": rows})
}

async fn new_session(app: &Router, backend: &str) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(json!({"backend": backend, "task": {"id": "demo"}, "views": ["head", "wrist"]}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn zero_delta_step_terminates_with_frames() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app, "oracle").await;
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(zero_chunk(16))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["terminated"], true);
    assert_eq!(v["chunk_index"], 0);
    assert_eq!(v["termination"]["reason"], "threshold");
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 2);
    for view in frames {
        let list = view.as_array().unwrap();
        assert_eq!(list.len(), 16);
        let png = base64::engine::general_purpose::STANDARD.decode(list[0].as_str().unwrap()).unwrap();
        let img = RgbImage::from_png_bytes(&png).unwrap();
        assert_eq!((img.width, img.height), (128, 80));
    }
    let (s, summary) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(summary["chunks_done"], 1);
    assert_eq!(summary["terminated"], true);
    assert_eq!(summary["task_id"], "demo");
    // the record is stored under the session id
    let (s, rec) = call(&app, "GET", &format!("/rollouts/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rec["chunks"].as_array().unwrap().len(), 1);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(zero_chunk(16))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn moving_steps_continue_until_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app, "oracle").await;
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(moving_chunk(16, 0.05))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["terminated"], false);
    let (_, summary) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(summary["memory_len"], 4);
    let z = summary["condition_action"][0][2].as_f64().unwrap();
    let start = SceneConfig::default().gripper_start.pose.position.z;
    assert!((z - (start + 0.05)).abs() < 1e-12);
    let held: Vec<Value> = vec![summary["condition_action"][0].clone(); 16];
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({"actions": held}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["chunk_index"], 1);
    assert_eq!(v["terminated"], true);
}

#[tokio::test]
async fn validation_and_unknown_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app, "oracle").await;
    let step = format!("/sessions/{id}/step");
    let (s, _) = call(&app, "POST", &step, Some(zero_chunk(15))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let mut short_row = zero_chunk(16);
    short_row["actions"][3] = json!([0.0, 0.0, 0.1, 0.0, 0.0, 0.0]);
    assert_eq!(call(&app, "POST", &step, Some(short_row)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let mut bad_open = zero_chunk(16);
    bad_open["actions"][0][6] = json!(1.5);
    assert_eq!(call(&app, "POST", &step, Some(bad_open)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_json = Request::builder().method("POST").uri(&step).body(Body::from("{\"actions\": [[1,2")).unwrap();
    assert_eq!(raw(&app, bad_json).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", &step, Some(json!({"acts": []}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    // nothing above consumed the session
    let (_, summary) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(summary["chunks_done"], 0);

    assert_eq!(call(&app, "GET", "/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/sessions/nope/step", Some(zero_chunk(16))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/sessions", Some(json!({"backend": "dream"}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", "/sessions", Some(json!({"backend": "oracle", "views": ["roof"]}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    // learned needs a model
    assert_eq!(call(&app, "POST", "/sessions", Some(json!({"backend": "learned"}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn concurrent_steps_one_wins() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app, "oracle").await;
    let step = format!("/sessions/{id}/step");
    let (a, b) = tokio::join!(call(&app, "POST", &step, Some(moving_chunk(16, 0.02))), call(&app, "POST", &step, Some(moving_chunk(16, 0.02))));
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    let (_, summary) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(summary["chunks_done"], 1);
}

#[tokio::test]
async fn verdicts_majority_and_restart_stability() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app, "oracle").await;
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(zero_chunk(16))).await;
    assert_eq!(s, StatusCode::OK);
    let url = format!("/rollouts/{id}/verdicts");
    for (e, l) in [("ann", "success"), ("bo", "success"), ("cy", "failure")] {
        let (s, v) = call(&app, "POST", &url, Some(json!({"evaluator": e, "label": l}))).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        assert_eq!(v["rollout_id"], id.as_str());
        assert_eq!(v["label"], l);
    }
    assert_eq!(call(&app, "POST", &url, Some(json!({"evaluator": "ann", "label": "failure"}))).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", &url, Some(json!({"evaluator": "dee", "label": "maybe"}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", "/rollouts/missing/verdicts", Some(json!({"evaluator": "x", "label": "success"}))).await.0, StatusCode::NOT_FOUND);

    let (s, summary) = call(&app, "GET", "/reports/summary", None).await;
    assert_eq!(s, StatusCode::OK);
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["summary"]["episodes"], 1);
    assert_eq!(rows[0]["summary"]["successes"], 1);
    assert_eq!(rows[0]["policy"], "interactive");

    let (s, list) = call(&app, "GET", "/rollouts", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list["rollouts"][0]["verdicts"].as_array().unwrap().len(), 3);
    let frame = Request::builder().uri(format!("/rollouts/{id}/frames/head/000_00.png")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(frame).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bad = Request::builder().uri(format!("/rollouts/{id}/frames/head/..%2Frecord.json")).body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(bad).await.unwrap().status(), StatusCode::NOT_FOUND);

    let restarted = self::app(dir.path());
    let (_, again) = call(&restarted, "GET", "/reports/summary", None).await;
    assert_eq!(again, summary);
}

#[tokio::test]
async fn learned_session_steps() {
    let dir = tempfile::tempdir().unwrap();
    let config = LearnedConfig::default();
    let model = TinyDenoiser::new(config.denoiser.clone());
    let app = router(AppState::new(dir.path(), Some((model, config)), EpisodeConfig::default()).unwrap());
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({"backend": "learned", "views": ["head"]}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let id = v["session_id"].as_str().unwrap();
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(moving_chunk(16, 0.03))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["frames"][0].as_array().unwrap().len(), 16);
    let (_, summary) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(summary["backend"], "learned");
    assert!(summary["state"].is_null());
}
