// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use fleetflow::config::Config;
use fleetflow_gateway::server::{router, AppState, Backend};

fn app_with(cfg: &Config) -> (Router, Arc<AppState>) {
    let state = AppState::build(cfg, Backend::Sim, None).unwrap();
    (router(state.clone()), state)
}

fn app() -> (Router, Arc<AppState>) {
    app_with(&Config::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let (parts, body) = resp.into_parts();
    let bytes = body.collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into())) };
    (parts.status, parts.headers, v)
}

fn spec(key: &str) -> Value {
    json!({"task": {"task_key": key, "env_spec": {"image": "python:3.11"}}})
}

#[tokio::test]
async fn submit_then_get_is_queued() {
    let (app, _) = app();
    let (status, _, body) = call(&app, "POST", "/v1/tasks", Some(spec("a"))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = body["task_id"].as_str().unwrap().to_string();
    let (status, _, body) = call(&app, "GET", &format!("/v1/tasks/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "Queued");
}

#[tokio::test]
async fn schema_violations_are_400() {
    let (app, _) = app();
    let (status, _, body) = call(&app, "POST", "/v1/tasks", Some(json!({"task": {"task_key": ""}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "SchemaViolation");
    let (status, _, body) = call(&app, "POST", "/v1/tasks", Some(spec(" "))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let req = Request::post("/v1/tasks").body(Body::from("not json")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let (app, _) = app();
    assert_eq!(call(&app, "GET", "/v1/tasks/task-999999", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/v1/artifacts/runs/x/nothing.json", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/v1/tasks/task-999999/cancel", Some(json!({}))).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cancel_conflicts_are_409() {
    let (app, state) = app();
    let id = call(&app, "POST", "/v1/tasks", Some(spec("a"))).await.2["task_id"].as_str().unwrap().to_string();
    state.driver.lock().run_until_idle().unwrap();
    let (_, _, task) = call(&app, "GET", &format!("/v1/tasks/{id}"), None).await;
    assert_eq!(task["status"], "Completed");
    let version = task["version"].as_u64().unwrap();

    let (status, _, body) = call(&app, "POST", &format!("/v1/tasks/{id}/cancel"), Some(json!({"expected_version": version + 7}))).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("VersionConflict")));
    let (status, _, body) = call(&app, "POST", &format!("/v1/tasks/{id}/cancel"), Some(json!({"expected_version": version}))).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("IllegalTransition")));
}

#[tokio::test]
async fn events_stream_as_sse() {
    let (app, state) = app();
    call(&app, "POST", "/v1/tasks", Some(spec("a"))).await;
    state.driver.lock().run_until_idle().unwrap();
    let last = state.bus.last_seq();
    assert!(last >= 3);

    let req = Request::get(format!("/v1/events?from_seq={last}")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/event-stream");
    let mut body = resp.into_body();
    let frame = body.frame().await.unwrap().unwrap().into_data().unwrap();
    let text = String::from_utf8(frame.to_vec()).unwrap();
    assert!(text.contains(&format!("id: {last}")), "{text}");
    assert!(text.contains("event: "), "{text}");

    let req = Request::get("/v1/events?kinds=Bogus").body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn rollout_result_is_served_as_artifact() {
    let (app, state) = app();
    let mut s = spec("repo-1");
    s["workload"] = json!({"kind": "rollout", "policy_id": "random", "run_id": "api", "replica_index": 0, "seed": 4});
    let (status, _, body) = call(&app, "POST", "/v1/tasks", Some(s)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    let id = body["task_id"].as_str().unwrap().to_string();
    state.driver.lock().run_until_idle().unwrap();
    let (status, _, result) = call(&app, "GET", &format!("/v1/artifacts/runs/api/tasks/{id}/result.json"), None).await;
    assert_eq!(status, StatusCode::OK, "{result}");
    assert_eq!(result["task_id"], id.as_str());
    assert!(result["rounds"].as_u64().unwrap() >= 1);
}

#[tokio::test]
async fn quota_round_trip() {
    let (app, state) = app();
    let (status, _, body) = call(&app, "PUT", "/v1/admin/quota/alice", Some(json!({"instance_hours": 2.5, "max_in_flight": 3}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(state.limits.quota.usage("alice").quota.instance_hours, Some(2.5));
    let (_, _, all) = call(&app, "GET", "/v1/admin/quota", None).await;
    assert_eq!(all["alice"]["quota"]["max_in_flight"], 3);
    let (status, _, _) = call(&app, "PUT", "/v1/admin/quota/alice", Some(json!({"instance_hours": -1.0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn infer_burst_is_rate_limited() {
    let cfg = Config::parse("[limits]\nmodel_calls_per_sec = 1.0\nburst = 2\n").unwrap();
    let (app, _) = app_with(&cfg);
    let body = json!({"policy_id": "random", "owner": "o", "task": {"task_key": "k", "env_spec": {"image": "img"}}});
    let mut codes = Vec::new();
    let mut retry_after = None;
    for _ in 0..5 {
        let (status, headers, _) = call(&app, "POST", "/v1/infer", Some(body.clone())).await;
        if status == StatusCode::TOO_MANY_REQUESTS {
            retry_after = headers.get(header::RETRY_AFTER).cloned();
        }
        codes.push(status);
    }
    assert_eq!(&codes[..2], &[StatusCode::OK, StatusCode::OK]);
    assert!(codes[2..].contains(&StatusCode::TOO_MANY_REQUESTS), "{codes:?}");
    let secs: u64 = retry_after.expect("Retry-After header").to_str().unwrap().parse().unwrap();
    assert!(secs >= 1);
    let (status, _, _) = call(&app, "POST", "/v1/infer", Some(json!({"policy_id": "nope", "task": body["task"]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn experiments_run_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.gateway.data_dir = Some(dir.path().to_path_buf());
    let (app, _) = app_with(&cfg);
    let spec = json!({"experiment": "startup_scaling", "strategy": "distributed", "grid": [1, 1000], "seed": 1, "repetitions": 1});
    let (status, _, report) = call(&app, "POST", "/v1/experiments", Some(spec)).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    assert_eq!(report["summary"]["rows"][1]["ephemeral_min"], 6.0);

    let capped = json!({"experiment": "throughput", "strategy": "centralized", "grid": [2001], "seed": 1, "repetitions": 1});
    assert_eq!(call(&app, "POST", "/v1/experiments", Some(capped)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn listing_endpoints() {
    let (app, state) = app();
    for k in ["a", "b"] {
        call(&app, "POST", "/v1/tasks", Some(spec(k))).await;
    }
    state.driver.lock().run_until_idle().unwrap();
    let (_, _, tasks) = call(&app, "GET", "/v1/tasks", None).await;
    assert_eq!(tasks.as_array().unwrap().len(), 2);
    let (_, _, instances) = call(&app, "GET", "/v1/instances", None).await;
    assert!(!instances.as_array().unwrap().is_empty());
    assert_eq!(call(&app, "GET", "/v1/health", None).await.0, StatusCode::OK);
}

#[test]
fn driver_thread_advances_submissions() {
    let state = AppState::build(&Config::default(), Backend::Sim, None).unwrap();
    let handle = state.spawn_driver();
    let spec: fleetflow::model::TaskSpec = serde_json::from_value(spec("bg")).unwrap();
    let id = state.driver.lock().submit(spec).unwrap();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
    loop {
        let done = state.driver.lock().control().task(&id).is_some_and(|t| t.status.is_terminal());
        if done {
            break;
        }
        assert!(std::time::Instant::now() < deadline, "background driver made no progress");
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    state.stop();
    handle.join().unwrap();
}
