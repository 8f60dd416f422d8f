use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use flywheel::server::{router, AppState};

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

fn small() -> Value {
    json!({ "verify_budget": 400 })
}

async fn armed(app: &Router) -> (String, String) {
    let (st, v) = call(
        app,
        "POST",
        "/sessions",
        Some(json!({ "id": "ref", "world": "two-ridges", "config": small() })),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    assert_eq!(v["stamp"]["head"], 0);
    let (st, v) = call(
        app,
        "POST",
        "/sessions/ref/audit",
        Some(json!({ "budget": 4000, "seed": 5 })),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let clusters = v["data"]["clusters"].as_array().unwrap();
    assert!(!clusters.is_empty());
    let top = clusters[0]["id"].as_str().unwrap().to_string();
    let (st, v) = call(
        app,
        "POST",
        &format!("/clusters/{top}/label"),
        Some(json!({ "verdict": "confirmed" })),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert!(v["data"]["labeled"].as_u64().unwrap() >= 1);
    assert!(v["stamp"]["sfkb_version"].as_u64().unwrap() > 0);
    (top, "ref".into())
}

#[tokio::test]
async fn walkthrough_and_merge_gate() {
    let app = router(Arc::new(AppState::ephemeral()));
    let (top, sid) = armed(&app).await;

    let (st, v) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v[0]["id"], "ref");

    let (st, v) = call(
        &app,
        "GET",
        &format!("/sessions/{sid}/heatmap?res=16"),
        None,
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["data"]["values"].as_array().unwrap().len(), 256);
    let (st, _) = call(&app, "GET", &format!("/sessions/{sid}/heatmap?v=9"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (_, v) = call(
        &app,
        "GET",
        &format!("/sessions/{sid}/flaws?status=resolved"),
        None,
    )
    .await;
    assert!(!v["data"].as_array().unwrap().is_empty());
    let (st, _) = call(
        &app,
        "GET",
        &format!("/sessions/{sid}/flaws?status=bogus"),
        None,
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    // relabeling is a conflict
    let (st, _) = call(
        &app,
        "POST",
        &format!("/clusters/{top}/label"),
        Some(json!({ "verdict": "benign" })),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);

    // a failing verification blocks the merge
    let bad = json!({ "mode": "seed_positive", "action": { "type": "seed_positive", "states": [{ "values": [0.5, 0.5] }] } });
    let (st, v) = call(&app, "POST", &format!("/clusters/{top}/propose"), Some(bad)).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    let rid = v["data"]["id"].as_str().unwrap().to_string();
    let (st, _) = call(&app, "POST", &format!("/refinements/{rid}/merge"), None).await;
    assert_eq!(st, StatusCode::CONFLICT, "unverified merge");
    let (_, v) = call(
        &app,
        "POST",
        &format!("/refinements/{rid}/verify"),
        Some(json!({ "seed": 1 })),
    )
    .await;
    assert_eq!(v["data"]["pass"], false);
    let (st, v) = call(&app, "POST", &format!("/refinements/{rid}/merge"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["data"]["verification"]["pass"], false);
    assert_eq!(v["stamp"]["head"], 0);

    // seeds are never invented
    let (st, _) = call(
        &app,
        "POST",
        &format!("/refinements/{rid}/verify"),
        Some(json!({})),
    )
    .await;
    assert!(st.is_client_error());

    let (_, v) = call(
        &app,
        "POST",
        &format!("/clusters/{top}/propose"),
        Some(json!({ "mode": "patch_negative" })),
    )
    .await;
    let rid = v["data"]["id"].as_str().unwrap().to_string();
    assert_eq!(v["data"]["proposal"]["author"], "agent");
    let (_, v) = call(
        &app,
        "POST",
        &format!("/refinements/{rid}/verify"),
        Some(json!({ "seed": 2 })),
    )
    .await;
    assert_eq!(v["data"]["pass"], true, "{v}");
    let (st, v) = call(&app, "POST", &format!("/refinements/{rid}/merge"), None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["data"]["version"], 1);
    assert_eq!(v["stamp"]["head"], 1);

    let (_, v) = call(&app, "GET", &format!("/sessions/{sid}/lineage"), None).await;
    assert_eq!(v["data"]["head"], 1);
    assert_eq!(v["data"]["entries"].as_array().unwrap().len(), 2);
    let (st, v) = call(&app, "GET", &format!("/sessions/{sid}/metrics"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(v["data"]["expert_fidelity"].as_f64().unwrap() >= 0.5);

    let (st, v) = call(
        &app,
        "POST",
        &format!("/sessions/{sid}/rollback"),
        Some(json!({ "version": 0 })),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["stamp"]["head"], 0);
}

#[tokio::test]
async fn steered_audit_and_errors() {
    let app = router(Arc::new(AppState::ephemeral()));
    let (st, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "id": "a.b", "world": "two-ridges" })),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "world": "no-such-world" })),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "world": "two-ridges", "config": small() })),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["data"]["id"], "s1");
    let body =
        json!({ "budget": 300, "seed": 3, "steer": { "center": [0.5, 0.5], "radius": 0.05 } });
    let (st, v) = call(&app, "POST", "/sessions/s1/audit", Some(body)).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["data"]["audit"]["evaluations"], 300);
    let (st, _) = call(
        &app,
        "POST",
        "/sessions/s1/audit",
        Some(json!({ "budget": 10 })),
    )
    .await;
    assert!(st.is_client_error());
    let (st, _) = call(&app, "GET", "/sessions/nope/metrics", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(
        &app,
        "POST",
        "/clusters/garbage/label",
        Some(json!({ "verdict": "benign" })),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", "/refinements/s1.99/merge", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn persisted_sessions_reload_and_export() {
    let root = tempfile::tempdir().unwrap();
    {
        let app = router(Arc::new(AppState::open(root.path()).unwrap()));
        armed(&app).await;
        let (st, v) = call(
            &app,
            "POST",
            "/sessions/ref/cycle",
            Some(json!({ "seed": 7, "max": 1 })),
        )
        .await;
        assert_eq!(st, StatusCode::OK, "{v}");
    }
    for f in [
        "world.json",
        "constraints.json",
        "data.csv",
        "artifacts/artifact_v0.json",
        "artifacts/lineage.json",
        "sfkb.jsonl",
        "reports/cycle_0.json",
    ] {
        assert!(root.path().join("ref").join(f).exists(), "{f}");
    }
    let app = router(Arc::new(AppState::open(root.path()).unwrap()));
    let (_, before) = call(&app, "GET", "/sessions/ref/metrics", None).await;
    let (st, archive) = call(&app, "GET", "/sessions/ref/export", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(archive["format"], "flywheel-archive-1");

    let other = router(Arc::new(AppState::ephemeral()));
    let (st, _) = call(
        &other,
        "POST",
        "/sessions/import",
        Some(json!({ "archive": archive })),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED);
    let (_, after) = call(&other, "GET", "/sessions/ref/metrics", None).await;
    assert_eq!(before, after);
    let (st, _) = call(
        &other,
        "POST",
        "/sessions/import",
        Some(json!({ "archive": archive })),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
}
