use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use siting_cli::service::router;
use siting_core::baselines::random_feasible;
use siting_core::citygen::{generate_city, CityGenSpec};
use siting_core::constraints::{ConstraintRegistry, RegistryPolicy};
use siting_core::domain::PreferenceVector;
use siting_core::explore::Explorer;
use siting_core::ppo::{ArchiveRecord, ParetoArchive};
use siting_core::reward::{evaluate_portfolio, RewardParams};
use tower::ServiceExt;

/// Three mutually non-dominated compliant records on a small city.
fn app() -> Router {
    let city = generate_city(&CityGenSpec::desk(60, 4)).unwrap();
    let registry = ConstraintRegistry::build(&city, &RegistryPolicy::default()).unwrap();
    let params = RewardParams::default();
    let found = random_feasible(&city, &registry, &params, 200, 9).unwrap();
    let mut full = ParetoArchive::new();
    for p in &found.portfolios {
        let obj = evaluate_portfolio(&city, &params, p).unwrap();
        let rec = ArchiveRecord::new(&city, obj, p.clone(), PreferenceVector::uniform(), 0, 1, vec![]).unwrap();
        full.insert(rec).unwrap();
    }
    assert!(full.len() >= 3, "need at least three front members");
    let archive = ParetoArchive::from_records(full.records()[..3].to_vec()).unwrap();
    router(Arc::new(Explorer::new(city, registry, archive, params)))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(body: &str) -> Request<Body> {
    Request::post("/reoptimize")
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap()
}

#[tokio::test]
async fn health_and_archive() {
    let app = app();
    let (s, v) = call(&app, get("/health")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["records"], 3);
    let (s, v) = call(&app, get("/archive")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn parcels_lookup_and_errors() {
    let app = app();
    let (s, v) = call(&app, get("/parcels?ids=0,5")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[1]["id"], 5);
    let (s, v) = call(&app, get("/parcels?ids=0,abc")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "ids");
    let (s, _) = call(&app, get("/parcels?ids=99999")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

fn score(entry: &Value, lambda: [f64; 4]) -> f64 {
    let n = &entry["normalized"];
    let total: f64 = lambda.iter().sum();
    ["accessibility", "environment", "neg_cost", "equity"]
        .iter()
        .zip(lambda)
        .map(|(k, l)| n[k].as_f64().unwrap() * l / total)
        .sum()
}

#[tokio::test]
async fn reoptimize_returns_weighted_argmax() {
    let app = app();
    let (_, entries) = call(&app, get("/archive")).await;
    let entries = entries.as_array().unwrap().clone();
    for lambda in [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.1, 0.2, 0.3, 0.4], [0.0, 0.0, 0.0, 1.0]] {
        let best = entries
            .iter()
            .max_by(|a, b| score(a, lambda).total_cmp(&score(b, lambda)))
            .unwrap();
        let body = json!({ "lambda": lambda }).to_string();
        let (s, v) = call(&app, post(&body)).await;
        assert_eq!(s, StatusCode::OK);
        assert!((score(&v, lambda) - score(best, lambda)).abs() < 1e-12);
        assert_eq!(v["compliance"]["feasible"], true);
        assert_eq!(v["soft_relaxed"], false);
    }
}

#[tokio::test]
async fn reoptimize_is_scale_invariant_and_repeatable() {
    let app = app();
    let (_, a) = call(&app, post(r#"{"lambda":[0.1,0.2,0.3,0.4]}"#)).await;
    let (_, b) = call(&app, post(r#"{"lambda":[1,2,3,4]}"#)).await;
    let (_, c) = call(&app, post(r#"{"lambda":[0.1,0.2,0.3,0.4]}"#)).await;
    assert_eq!(a["record"], b["record"]);
    assert_eq!(a["portfolio"], c["portfolio"]);
    assert_eq!(a["explanation"], c["explanation"]);
}

#[tokio::test]
async fn malformed_requests_name_the_field() {
    let app = app();
    let (s, v) = call(&app, post(r#"{"lambda":[1,2,3]}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "lambda");
    let (s, v) = call(&app, post(r#"{"lambda":[0,0,0,0]}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "lambda");
    let (s, v) = call(&app, post(r#"{"lambda":[1,1,1,1],"budget_override":-5}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "budget_override");
    let (s, _) = call(&app, post("not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn explain_known_and_unknown_records() {
    let app = app();
    let (_, entries) = call(&app, get("/archive")).await;
    let id = entries[0]["id"].as_u64().unwrap();
    let (s, v) = call(&app, get(&format!("/explain/{id}"))).await;
    assert_eq!(s, StatusCode::OK);
    let parcels = v["parcels"].as_array().unwrap();
    assert!(!parcels.is_empty());
    for p in parcels {
        let total: f64 = p["factors"].as_array().unwrap().iter().map(|f| f["weight_pct"].as_f64().unwrap()).sum();
        assert!((total - 100.0).abs() < 1e-9);
    }
    assert_eq!(call(&app, get("/explain/4242")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, get("/explain/x")).await.0, StatusCode::BAD_REQUEST);
}
