use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use causerank_cli::server::{router, AppState, RunView};
use causerank_core::engine::Workspace;
use causerank_core::ingest::serialize_records;
use causerank_core::synth::{generate, preset, ScenarioSpec, SCENARIO_QUERY};

struct Api {
    app: Router,
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
}

struct Reply {
    status: StatusCode,
    body: Value,
    echo: Option<String>,
}

impl Api {
    fn new() -> Api {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let ws = Workspace::open(&root).unwrap().with_threads(2);
        Api {
            app: router(AppState::new(ws)),
            _dir: dir,
            root,
        }
    }

    async fn call(&self, method: &str, uri: &str, body: impl Into<Body>, key: Option<&str>) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(k) = key {
            req = req.header("idempotency-key", k);
        }
        let resp = self.app.clone().oneshot(req.body(body.into()).unwrap()).await.unwrap();
        let status = resp.status();
        let echo = resp.headers().get("idempotency-key").map(|v| v.to_str().unwrap().to_string());
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        Reply { status, body, echo }
    }

    async fn get(&self, uri: &str) -> Reply {
        self.call("GET", uri, Body::empty(), None).await
    }

    async fn post(&self, uri: &str, body: Value) -> Reply {
        self.call("POST", uri, body.to_string(), None).await
    }

    /// Dataset + table for a scenario; returns the table id.
    async fn load(&self, spec: &ScenarioSpec) -> (String, causerank_core::synth::Scenario) {
        let s = generate(spec);
        let r = self.call("POST", "/v1/datasets", serialize_records(&s.to_records()), None).await;
        assert_eq!(r.status, StatusCode::CREATED, "{:?}", r.body);
        let ds = r.body["id"].as_str().unwrap().to_string();
        let r = self.post(&format!("/v1/datasets/{ds}/queries"), json!({ "query": SCENARIO_QUERY })).await;
        assert_eq!(r.status, StatusCode::CREATED, "{:?}", r.body);
        (r.body["id"].as_str().unwrap().to_string(), s)
    }
}

fn small(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        n_families: 30,
        t: 400,
        seed,
        ..Default::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_returns_top_twenty_with_scores_and_p_values() {
    let api = Api::new();
    let (table, s) = api.load(&small(1)).await;
    let r = api.post("/v1/sessions", json!({ "table": table, "target": "target", "config": { "method": "l2" } })).await;
    assert_eq!(r.status, StatusCode::CREATED, "{:?}", r.body);
    let sid = r.body["id"].as_str().unwrap().to_string();

    let r = api.call("POST", &format!("/v1/sessions/{sid}/run?wait=true"), "", Some("key-1")).await;
    assert_eq!(r.status, StatusCode::OK, "{:?}", r.body);
    assert_eq!(r.echo.as_deref(), Some("key-1"));
    let view: RunView = serde_json::from_value(r.body.clone()).unwrap();
    assert_eq!(view.run, 1);
    assert_eq!(view.entries.len(), 20);
    for e in &r.body["entries"].as_array().unwrap()[..] {
        assert!(e["family"].is_string() && e["score"].is_number() && e["p_value"].is_number());
    }
    assert_eq!(view.entries[0].family, s.cause().unwrap());

    // same idempotency key: cached run, no new history
    let again = api.call("POST", &format!("/v1/sessions/{sid}/run?wait=true"), "", Some("key-1")).await;
    assert_eq!(again.status, StatusCode::OK);
    assert_eq!(again.body["run"], 1);
    assert_eq!(again.body["entries"], r.body["entries"]);
    let r = api.get(&format!("/v1/sessions/{sid}")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["runs"].as_array().unwrap().len(), 1);
    assert_eq!(r.body["session"]["target"], "target");

    let r = api.get(&format!("/v1/sessions/{sid}/runs/1")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["report"]["ranked"]["k"], 20);
    assert_eq!(api.get(&format!("/v1/sessions/{sid}/runs/9")).await.status, StatusCode::NOT_FOUND);

    let top = view.entries[0].family.clone();
    let r = api.get(&format!("/v1/sessions/{sid}/plots/{top}")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["observed"].as_array().unwrap().len(), 400);
    assert_eq!(r.body["predicted"].as_array().unwrap().len(), 400);
    let r = api.get(&format!("/v1/sessions/{sid}/plots/target")).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.body["code"], "not-found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn async_run_can_be_polled() {
    let api = Api::new();
    let (table, _) = api.load(&small(2)).await;
    let r = api.post("/v1/sessions", json!({ "table": table, "target": "target" })).await;
    let sid = r.body["id"].as_str().unwrap().to_string();
    let first = api.post(&format!("/v1/sessions/{sid}/run"), json!({ "token": "a" })).await;
    let second = api.post(&format!("/v1/sessions/{sid}/run"), json!({ "token": "b" })).await;
    assert!(first.status == StatusCode::ACCEPTED || first.status == StatusCode::OK);
    assert_eq!(first.body["run"], 1);
    assert_eq!(second.body["run"], 2);
    for n in [1, 2] {
        let mut done = None;
        for _ in 0..600 {
            let r = api.get(&format!("/v1/sessions/{sid}/runs/{n}")).await;
            if r.status == StatusCode::OK {
                done = Some(r);
                break;
            }
            assert_eq!(r.status, StatusCode::ACCEPTED);
            assert_eq!(r.body["status"], "running");
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        let r = done.expect("run finished");
        assert_eq!(r.body["status"], "done");
    }
    // reruns of an identical session give byte-identical reports
    let a = std::fs::read(api.root.join(format!("reports/{sid}/1.json"))).unwrap();
    let b = std::fs::read(api.root.join(format!("reports/{sid}/2.json"))).unwrap();
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_codes() {
    let api = Api::new();
    let (table, _) = api.load(&small(3)).await;

    let r = api.post("/v1/sessions", json!({ "table": table, "target": "target", "condition": ["target"] })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.body["code"], "invalid-hypothesis");

    let r = api.post("/v1/sessions", json!({ "table": table, "target": "nope" })).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = api.post("/v1/sessions", json!({ "table": "tbl-missing", "target": "target" })).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = api.call("POST", "/v1/sessions", "{not json", None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.body["code"], "bad-request");
    let r = api.post("/v1/sessions", json!({ "table": table, "target": "target", "config": { "method": "lasso" } })).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.body["message"].as_str().unwrap().contains("valid methods"));

    let r = api.get("/v1/sessions/s0404").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = api.post("/v1/sessions/s0404/run", json!({})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = api.get("/v1/nowhere").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let r = api.call("POST", "/v1/datasets", "garbage\n", Some("k")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.echo.as_deref(), Some("k"));

    let ds = api.dataset_id().await;
    let dup = format!("{SCENARIO_QUERY}; {SCENARIO_QUERY}");
    let r = api.post(&format!("/v1/datasets/{ds}/queries"), json!({ "query": dup })).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.body["code"], "conflict");
    let r = api.post(&format!("/v1/datasets/{ds}/queries"), json!({ "query": "FAMILY BY" })).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

impl Api {
    async fn dataset_id(&self) -> String {
        let s = generate(&ScenarioSpec {
            n_families: 2,
            t: 20,
            ..Default::default()
        });
        let r = self.call("POST", "/v1/datasets", serialize_records(&s.to_records()), None).await;
        r.body["id"].as_str().unwrap().to_string()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pseudocause_and_fork() {
    let api = Api::new();
    let (table, s) = api.load(&ScenarioSpec {
        n_families: 20,
        ..preset("seasonal", 3).unwrap()
    })
    .await;
    let cause = s.cause().unwrap().to_string();
    let r = api.post("/v1/sessions", json!({ "table": table, "target": "target" })).await;
    let parent = r.body["id"].as_str().unwrap().to_string();
    let before = api.post(&format!("/v1/sessions/{parent}/run?wait=true"), json!({})).await;

    let r = api.post(&format!("/v1/sessions/{parent}/pseudocause"), json!({ "kind": "seasonal", "period": 1 })).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = api.post(&format!("/v1/sessions/{parent}/pseudocause"), json!({ "kind": "seasonal", "period": 60 })).await;
    assert_eq!(r.status, StatusCode::CREATED, "{:?}", r.body);
    let key = r.body["key"].as_str().unwrap().to_string();
    assert_eq!(r.body["series"].as_array().unwrap().len(), 1440);
    let r = api.post(&format!("/v1/sessions/{parent}/pseudocause"), json!({ "kind": "seasonal", "period": 60 })).await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    let r = api.post(&format!("/v1/sessions/{parent}/fork"), json!({ "condition": ["target"] })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = api.post(&format!("/v1/sessions/{parent}/fork"), json!({ "condition": [key] })).await;
    assert_eq!(r.status, StatusCode::CREATED, "{:?}", r.body);
    assert_eq!(r.body["parent"], parent);
    let child = r.body["id"].as_str().unwrap().to_string();
    let after = api.post(&format!("/v1/sessions/{child}/run?wait=true"), json!({})).await;
    assert_eq!(after.status, StatusCode::OK);
    let rank = |r: &Reply| r.body["entries"].as_array().unwrap().iter().position(|e| e["family"] == cause.as_str()).unwrap() + 1;
    assert!(rank(&after) < rank(&before));
    assert_eq!(rank(&after), 1);
    assert_ne!(after.body["entries"], before.body["entries"]);
    // the parent keeps its single run
    let r = api.get(&format!("/v1/sessions/{parent}")).await;
    assert_eq!(r.body["runs"].as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cli_and_api_produce_identical_rankings() {
    let api = Api::new();
    let (table, _) = api.load(&small(4)).await;
    let r = api
        .post(
            "/v1/sessions",
            json!({ "table": table, "target": "target", "config": { "method": "l2-p5", "seed": 17 } }),
        )
        .await;
    let sid = r.body["id"].as_str().unwrap().to_string();
    let r = api.post(&format!("/v1/sessions/{sid}/run?wait=true"), json!({})).await;
    assert_eq!(r.status, StatusCode::OK);
    let report: causerank_core::engine::RunReport = serde_json::from_value(r.body["report"].clone()).unwrap();

    let table_file = api.root.join(format!("tables/{table}.json"));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = causerank_cli::run(
        ["causerank", "rank", table_file.to_str().unwrap(), "--target", "target", "--method", "l2", "--proj-dim", "5", "--seed", "17"],
        &mut out,
        &mut err,
    );
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    assert_eq!(String::from_utf8(out).unwrap(), report.ranked.to_jsonl());
}
