use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use irec_core::config::Config;
use irec_core::embedding::HashingEmbedder;
use irec_core::graph::GraphStore;
use irec_core::llm::ScriptedLlm;
use irec_core::workflow::{Engine, ManualClock};
use serde_json::{json, Value};
use tower::ServiceExt;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/scenario").join(name)
}

fn read(name: &str) -> String {
    std::fs::read_to_string(scenario(name)).unwrap()
}

struct Api {
    app: Router,
    engine: Engine,
    stub: Arc<ScriptedLlm>,
}

fn api() -> Api {
    let stub = Arc::new(ScriptedLlm::from_dir(&scenario("llm")).unwrap());
    let engine = Engine::with_provider(
        Arc::new(GraphStore::with_seed(3)),
        Arc::new(HashingEmbedder::new(256)),
        stub.clone(),
        &Config::default(),
        Arc::new(ManualClock::new(1_760_000_000)),
    );
    Api { app: irec_server::router(engine.clone()), engine, stub }
}

impl Api {
    async fn raw(&self, method: &str, uri: &str, body: Body, content_type: &str) -> (StatusCode, String) {
        let req = Request::builder().method(method).uri(uri).header("content-type", content_type).body(body).unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        (status, String::from_utf8(bytes.to_vec()).unwrap())
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let body = body.map_or_else(Body::empty, |b| Body::from(b.to_string()));
        let (status, text) = self.raw(method, uri, body, "application/json").await;
        (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    /// Captures the scenario note and imports the distractor.
    async fn seed(&self) -> (String, String) {
        let (status, captured) = self.call("POST", "/insights", Some(json!({ "note": read("note.txt") }))).await;
        assert_eq!(status, StatusCode::CREATED);
        let (status, report) =
            self.raw("POST", "/import?parallelism=2", Body::from(read("distractor.jsonl")), "application/x-ndjson").await;
        assert_eq!(status, StatusCode::OK, "{report}");
        self.engine.wait_background().await;
        let usub = captured["card"]["id"].as_str().unwrap().to_owned();
        let double = self
            .engine
            .store()
            .snapshot()
            .cards
            .into_iter()
            .find(|c| c.id.as_str() != usub)
            .unwrap()
            .id
            .to_string();
        (usub, double)
    }

    async fn query(&self, filter: &str) -> String {
        let body = json!({ "query": read("query.txt").trim(), "mode": "balanced", "filter_level": filter });
        let (status, v) = self.call("POST", "/query", Some(body)).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        let id = v["session_id"].as_str().unwrap().to_owned();
        self.engine.wait_session(&id).await.unwrap();
        id
    }
}

/// Parses an SSE body into (event, id, data) triples.
fn parse_sse(body: &str) -> Vec<(String, u64, Value)> {
    body.split("\n\n")
        .filter(|block| block.contains("data:"))
        .map(|block| {
            let field = |name: &str| {
                block.lines().find_map(|l| l.strip_prefix(name)).map(|v| v.trim_start().to_owned()).unwrap()
            };
            (field("event:"), field("id:").parse().unwrap(), serde_json::from_str(&field("data:")).unwrap())
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn query_stream_and_open() {
    let api = api();
    let (usub, double) = api.seed().await;
    let id = api.query("strict").await;

    let (status, body) = api.raw("GET", &format!("/sessions/{id}/events"), Body::empty(), "text/plain").await;
    assert_eq!(status, StatusCode::OK);
    let events = parse_sse(&body);
    let names: Vec<_> = events.iter().map(|e| e.0.as_str()).collect();
    assert_eq!(names, ["preliminary_results", "tags_resolved", "reranked_results", "assessments_ready", "final_results"]);
    assert!(events.iter().enumerate().all(|(i, e)| e.1 == i as u64 && e.2["seq"] == i));
    let fin = &events[4].2["payload"];
    assert_eq!(fin["results"].as_array().unwrap().len(), 1);
    assert_eq!(fin["results"][0]["card_id"], usub.as_str());
    assert_eq!(fin["results"][0]["assessment"]["score"], 1);
    for key in ["R", "A", "T", "D", "S_final"] {
        assert!(fin["results"][0][key].is_number(), "{key}");
    }

    let req = Request::builder()
        .uri(format!("/sessions/{id}/events"))
        .header("last-event-id", "2")
        .body(Body::empty())
        .unwrap();
    let resp = api.app.clone().oneshot(req).await.unwrap();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let resumed = parse_sse(std::str::from_utf8(&body).unwrap());
    assert_eq!(resumed.iter().map(|e| e.1).collect::<Vec<_>>(), vec![3, 4]);

    let (_, poll) = api.call("GET", &format!("/sessions/{id}/events/poll?since=4"), None).await;
    assert_eq!(poll["done"], true);
    assert_eq!(poll["events"].as_array().unwrap().len(), 1);

    let (status, log) = api.call("GET", &format!("/sessions/{id}/log"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(log.as_array().unwrap().len(), 8);

    let (_, info) = api.call("GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(info["state"], "complete");
    assert_eq!(info["filter_level"], "strict");

    let open = format!("/sessions/{id}/open");
    let (status, ack) = api.call("POST", &open, Some(json!({ "card_id": usub }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((ack["access_count"].as_u64(), ack["counted"].as_bool()), (Some(1), Some(true)));
    let (_, ack) = api.call("POST", &open, Some(json!({ "card_id": usub }))).await;
    assert_eq!((ack["access_count"].as_u64(), ack["counted"].as_bool()), (Some(1), Some(false)));
    let (status, err) = api.call("POST", &open, Some(json!({ "card_id": double }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "not_in_session");
}

#[tokio::test]
async fn error_mapping() {
    let api = api();
    let (status, e) = api.call("POST", "/query", Some(json!({ "query": "  " }))).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("empty_query")));
    let (status, e) = api.call("GET", "/sessions/nope/log", None).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
    let (status, _) = api.call("GET", "/sessions/nope/events", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, e) = api.call("POST", "/cards/ghost/insights", Some(json!({ "text": "x" }))).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_card")));
    let (status, e) = api.call("POST", "/insights", Some(json!({ "note": "" }))).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("empty_note")));
    let (status, e) = api.call("POST", "/decisions/dec-000042", Some(json!({ "action": "accept" }))).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_decision")));
    let (status, _) = api.call("POST", "/query", Some(json!({ "query": "x", "mode": "cramming" }))).await;
    assert!(status.is_client_error());
    let (status, _) = api.call("GET", "/no/such/route", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn decisions_accept_veto_modify() {
    let api = api();
    let (_, first) =
        api.call("POST", "/insights", Some(json!({ "note": "p1 ||| i1 ||| Algebra, Quadratics" }))).await;
    let card = first["card"]["id"].as_str().unwrap().to_owned();
    assert_eq!(first["decisions"].as_array().unwrap().len(), 2);

    let (_, pending) = api.call("GET", "/decisions?pending=true", None).await;
    let pending = pending.as_array().unwrap().clone();
    assert_eq!(pending.len(), 2);
    assert!(pending.iter().all(|d| d["confirmed"] == false));

    let before = api.engine.store().snapshot();
    let (status, vetoed) = api.call("POST", &format!("/decisions/{}", pending[0]["id"].as_str().unwrap()), Some(json!({ "action": "veto" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(vetoed["status"], "vetoed");
    assert_eq!(api.engine.store().snapshot(), before);

    let (status, accepted) = api.call("POST", &format!("/decisions/{}", pending[1]["id"].as_str().unwrap()), Some(json!({ "action": "accept" }))).await;
    assert_eq!(status, StatusCode::OK);
    let tag = accepted["applied_tag_id"].as_str().unwrap().to_owned();
    let (_, c) = api.call("GET", &format!("/cards/{card}"), None).await;
    assert_eq!(c["tag_ids"], json!([tag]));
    let (status, e) = api.call("POST", &format!("/decisions/{}", pending[1]["id"].as_str().unwrap()), Some(json!({ "action": "veto" }))).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::CONFLICT, Some("already_confirmed")));

    let (_, second) = api.call("POST", "/insights", Some(json!({ "note": "p2 ||| i2 ||| Vectors" }))).await;
    let id = second["decisions"][0]["id"].as_str().unwrap().to_owned();
    let modify = json!({
        "action": "modify",
        "outcome": { "action": "create_under", "parent": { "kind": "existing", "value": tag }, "name": "Dot Product" }
    });
    let (status, modified) = api.call("POST", &format!("/decisions/{id}"), Some(modify)).await;
    assert_eq!(status, StatusCode::OK, "{modified}");
    assert_eq!(modified["status"], "modified");
    let created = api.engine.store().find_tag("dot product", Some(&tag.as_str().into())).unwrap();
    assert_eq!(modified["applied_tag_id"], created.id.as_str());

    let (_, third) = api.call("POST", "/insights", Some(json!({ "note": "p3 ||| i3 ||| Matrices" }))).await;
    let id = third["decisions"][0]["id"].as_str().unwrap().to_owned();
    let bad = json!({ "action": "modify", "outcome": { "action": "map_to", "tag_id": "no-such-tag" } });
    let (status, e) = api.call("POST", &format!("/decisions/{id}"), Some(bad)).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_outcome")));

    let (_, all) = api.call("GET", "/decisions", None).await;
    assert_eq!(all.as_array().unwrap().len(), 4);
    let (_, stats) = api.call("GET", "/stats", None).await;
    assert_eq!(stats["cards"], 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn inquiry_round_trip_and_outage() {
    let api = api();
    let (usub, _) = api.seed().await;
    let sid = api.query("strict").await;
    let (status, start) = api.call("POST", "/inquiry", Some(json!({ "problem_id": sid, "card_id": usub }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(start["turn"]["role"], "tutor");
    assert_eq!(start["turn"]["context_refs"]["recalled_card_id"], usub.as_str());
    let inq = start["inquiry_id"].as_str().unwrap().to_owned();

    let (status, turn) = api.call("POST", &format!("/inquiry/{inq}/turns"), Some(json!({ "text": "2x is there" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(turn["role"], "tutor");

    api.stub.set_down(true);
    let (status, e) = api.call("POST", &format!("/inquiry/{inq}/turns"), Some(json!({ "text": "?" }))).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("llm_unavailable")));
    api.stub.set_down(false);
    let (_, transcript) = api.call("GET", &format!("/inquiry/{inq}"), None).await;
    let roles: Vec<_> = transcript["turns"].as_array().unwrap().iter().map(|t| t["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["tutor", "user", "tutor"]);

    let (status, e) = api.call("POST", "/inquiry", Some(json!({ "card_id": usub }))).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("missing_problem")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn append_and_import_report() {
    let api = api();
    let (usub, _) = api.seed().await;
    let (status, card) = api.call("POST", &format!("/cards/{usub}/insights"), Some(json!({ "text": "inverse chain rule" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(card["insight_text"].as_str().unwrap().contains("inverse chain rule"));

    let jsonl = "{\"problem\":\"a\",\"insight\":\"b\"}\nnot json\n{\"problem\":\"c\",\"insight\":\"d\",\"tags\":[\"X/Y\"]}\n";
    let (status, report) = api.raw("POST", "/import", Body::from(jsonl), "application/x-ndjson").await;
    assert_eq!(status, StatusCode::OK);
    let report: Value = serde_json::from_str(&report).unwrap();
    assert_eq!((report["imported"].as_u64(), report["failed"].as_u64()), (Some(2), Some(1)));
    assert_eq!(report["failures"][0]["line"], 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_over_tcp() {
    let api = api();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(irec_server::serve(api.engine.clone(), listener, async move {
        let _ = rx.await;
    }));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream.write_all(b"GET /stats HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").await.unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"cards\":0"));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}

#[tokio::test]
async fn tags_and_stats() {
    let api = api();
    api.seed().await;
    let (status, tags) = api.call("GET", "/tags", None).await;
    assert_eq!(status, StatusCode::OK);
    let tags = tags.as_array().unwrap();
    let names: Vec<&str> = tags.iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
    let root = tags.iter().find(|t| t["name"] == "Calculus").unwrap();
    let child = tags.iter().find(|t| t["name"] == "Multiple Integrals").unwrap();
    assert_eq!(child["parent_id"], root["id"]);
    assert_eq!((root["level"].as_u64(), child["level"].as_u64()), (Some(0), Some(1)));
    assert!(tags.iter().all(|t| t.get("embedding").is_none()));

    let (_, stats) = api.call("GET", "/stats", None).await;
    assert_eq!(stats, json!({"cards": 2, "embedded_cards": 2, "tags": 2, "edges": 1}));
}
