use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use crowdspan::corpus::{serialize_pubtator, GoldCorpus, PartitionConfig};
use crowdspan::lifecycle::default_quiz_bank;
use crowdspan::simulate::{synthetic_corpus, SyntheticCorpusSpec};
use crowdspan::store::read_log;
use crowdspan_server::{router, serve_on, ApiConfig, AppState, ServerError};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    config: ApiConfig,
    corpus: GoldCorpus,
}

fn fixture(redundancy: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic_corpus(SyntheticCorpusSpec { regular_docs: 3, ..Default::default() }, 8);
    let corpus_path = dir.path().join("corpus.txt");
    std::fs::write(&corpus_path, serialize_pubtator(&corpus)).unwrap();
    let ids: Vec<String> = corpus.documents.keys().cloned().collect();
    let config = ApiConfig {
        corpus: corpus_path,
        log: dir.path().join("events.log"),
        redundancy_target: redundancy,
        seed: 3,
        partition: PartitionConfig {
            training_ids: Some(ids[..4].to_vec()),
            gold_feedback_ids: Some(ids[4..6].to_vec()),
            ..Default::default()
        },
        ..Default::default()
    };
    Fixture { _dir: dir, config, corpus }
}

fn app(config: &ApiConfig) -> Router {
    router(Arc::new(AppState::from_config(config).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn kinds(log: &Path) -> Vec<String> {
    read_log(log).unwrap().iter().map(|r| r.event.kind().to_string()).collect()
}

fn answers(correct: usize) -> Vec<bool> {
    default_quiz_bank()
        .iter()
        .enumerate()
        .map(|(i, q)| if i < correct { q.expected } else { !q.expected })
        .collect()
}

fn survey() -> Value {
    json!({
        "gender": "female",
        "age": "21-35",
        "occupation": "science",
        "education": "masters",
        "motivations": ["help science"],
        "request_token": "survey-1"
    })
}

fn gold_spans(corpus: &GoldCorpus, doc_id: &str) -> Value {
    corpus
        .gold_spans(doc_id)
        .iter()
        .map(|s| json!({"start": s.start, "end": s.end}))
        .collect()
}

/// Registers a worker and takes it through the quiz and the survey.
async fn onboard(app: &Router, tag: &str) -> String {
    let (status, body) = call(app, "POST", "/workers", Some(json!({"request_token": format!("reg-{tag}")}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = body["worker_id"].as_str().unwrap().to_string();
    let (status, _) = call(app, "POST", &format!("/workers/{id}/quiz"), Some(json!({"answers": answers(10)}))).await;
    assert_eq!(status, StatusCode::OK);
    let mut s = survey();
    s["request_token"] = json!(format!("survey-{tag}"));
    let (status, _) = call(app, "POST", &format!("/workers/{id}/survey"), Some(s)).await;
    assert_eq!(status, StatusCode::OK);
    id
}

#[tokio::test]
async fn scripted_session_produces_the_expected_event_sequence() {
    let fx = fixture(15);
    let app = app(&fx.config);

    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!((status, body), (StatusCode::OK, json!("ok")));

    let (status, body) = call(&app, "POST", "/workers", Some(json!({"request_token": "reg-1"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["state"], "REGISTERED");
    let id = body["worker_id"].as_str().unwrap().to_string();
    let (_, again) = call(&app, "POST", "/workers", Some(json!({"request_token": "reg-1"}))).await;
    assert_eq!(again["worker_id"], id.as_str());

    let (status, quiz) = call(&app, "GET", "/quiz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(quiz.as_array().unwrap().len(), 10);
    assert!(quiz[0].get("expected").is_none());

    let (status, grade) =
        call(&app, "POST", &format!("/workers/{id}/quiz"), Some(json!({"answers": answers(8), "request_token": "quiz-1"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((grade["correct"].as_u64(), grade["passed"].as_bool()), (Some(8), Some(true)));
    assert_eq!(grade["state"], "QUALIFIED");

    let (status, body) = call(&app, "POST", &format!("/workers/{id}/survey"), Some(survey())).await;
    assert_eq!((status, body["state"].clone()), (StatusCode::OK, json!("SURVEYED")));

    for step in 1..=4 {
        let (status, task) = call(&app, "GET", &format!("/workers/{id}/next-task"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(task["context"], "TRAINING");
        let doc_id = task["doc_id"].as_str().unwrap();
        assert_eq!(doc_id, fx.config.partition.training_ids.as_ref().unwrap()[step - 1]);
        let doc = fx.corpus.document(doc_id).unwrap();
        assert_eq!(task["title"], doc.title.as_str());
        assert_eq!(task["tokens"].as_array().unwrap().len(), doc.token_count());
        let request = json!({"request_token": format!("sub-{step}"), "doc_id": doc_id, "spans": gold_spans(&fx.corpus, doc_id)});
        let (status, feedback) = call(&app, "POST", &format!("/workers/{id}/submissions"), Some(request)).await;
        assert_eq!(status, StatusCode::OK, "{feedback}");
        assert_eq!(feedback["kind"], "GOLD");
        assert_eq!(feedback["f_score"], 1.0);
        let expected = if step == 4 { "ACTIVE".to_string() } else { format!("TRAINING({step})") };
        assert_eq!(feedback["state"], expected.as_str());
    }

    let (status, task) = call(&app, "GET", &format!("/workers/{id}/next-task"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(task["context"], "REGULAR");
    let doc_id = task["doc_id"].as_str().unwrap().to_string();
    // a raw selection inside the first gold token is widened to that token
    let first = &fx.corpus.gold_spans(&doc_id)[0];
    let request = json!({"request_token": "sub-5", "doc_id": doc_id, "spans": [{"start": first.start, "end": first.start + 1}]});
    let (status, feedback) = call(&app, "POST", &format!("/workers/{id}/submissions"), Some(request.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(feedback["kind"], "NONE");
    assert_eq!(feedback["state"], "ACTIVE");

    let expected = [
        "WORKER_REGISTERED",
        "QUIZ_GRADED",
        "SURVEY_RECORDED",
        "ASSIGNED",
        "SUBMITTED",
        "ASSIGNED",
        "SUBMITTED",
        "ASSIGNED",
        "SUBMITTED",
        "ASSIGNED",
        "SUBMITTED",
        "ASSIGNED",
        "SUBMITTED",
    ];
    assert_eq!(kinds(&fx.config.log), expected);

    let log = read_log(&fx.config.log).unwrap();
    let stored = serde_json::to_value(&log.last().unwrap().event).unwrap();
    let token_span = fx
        .corpus
        .document(&doc_id)
        .unwrap()
        .snap_to_tokens(first.start, first.start + 1)
        .unwrap();
    assert_eq!(stored["payload"]["spans"], json!([{"start": token_span.start, "end": token_span.end}]));

    // retries change nothing
    let (status, retry) = call(&app, "POST", &format!("/workers/{id}/submissions"), Some(request)).await;
    assert_eq!((status, retry), (StatusCode::OK, feedback));
    let (status, _) =
        call(&app, "POST", &format!("/workers/{id}/quiz"), Some(json!({"answers": answers(8), "request_token": "quiz-1"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(kinds(&fx.config.log).len(), expected.len());

    // the same token for another request is refused
    let (status, err) = call(
        &app,
        "POST",
        &format!("/workers/{id}/submissions"),
        Some(json!({"request_token": "sub-5", "doc_id": "10000000", "spans": []})),
    )
    .await;
    assert_eq!((status, err["error"].clone()), (StatusCode::CONFLICT, json!("TOKEN_CONFLICT")));
}

#[tokio::test]
async fn out_of_order_calls_are_conflicts() {
    let fx = fixture(15);
    let app = app(&fx.config);
    let (_, body) = call(&app, "POST", "/workers", None).await;
    let id = body["worker_id"].as_str().unwrap().to_string();

    let (status, err) = call(&app, "GET", &format!("/workers/{id}/next-task"), None).await;
    assert_eq!((status, err["error"].clone()), (StatusCode::CONFLICT, json!("WRONG_STATE")));
    let (status, _) = call(&app, "POST", &format!("/workers/{id}/survey"), Some(survey())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, err) = call(&app, "POST", &format!("/workers/{id}/quiz"), Some(json!({"answers": [true]}))).await;
    assert_eq!((status, err["error"].clone()), (StatusCode::UNPROCESSABLE_ENTITY, json!("LENGTH_MISMATCH")));

    let (status, grade) = call(&app, "POST", &format!("/workers/{id}/quiz"), Some(json!({"answers": answers(7)}))).await;
    assert_eq!((status, grade["state"].clone()), (StatusCode::OK, json!("REJECTED")));
    let (status, _) = call(&app, "POST", &format!("/workers/{id}/quiz"), Some(json!({"answers": answers(10)}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, err) = call(&app, "GET", "/workers/W99999/next-task", None).await;
    assert_eq!((status, err["error"].clone()), (StatusCode::NOT_FOUND, json!("UNKNOWN_WORKER")));
}

#[tokio::test]
async fn peers_are_aliased_and_exhausted_workers_get_no_content() {
    let fx = fixture(2);
    let app = app(&fx.config);
    let first = onboard(&app, "a").await;
    let second = onboard(&app, "b").await;

    let mut regular_by_first = Vec::new();
    for (worker, tag) in [(&first, "a"), (&second, "b")] {
        let mut n = 0;
        loop {
            let (status, task) = call(&app, "GET", &format!("/workers/{worker}/next-task"), None).await;
            if status == StatusCode::NO_CONTENT {
                break;
            }
            assert_eq!(status, StatusCode::OK);
            let doc_id = task["doc_id"].as_str().unwrap().to_string();
            n += 1;
            let request = json!({"request_token": format!("{tag}-{n}"), "doc_id": doc_id, "spans": gold_spans(&fx.corpus, &doc_id)});
            let (status, feedback) = call(&app, "POST", &format!("/workers/{worker}/submissions"), Some(request)).await;
            assert_eq!(status, StatusCode::OK);
            let text = feedback.to_string();
            assert!(!text.contains(&format!("\"{first}\"")) && !text.contains(&format!("\"{second}\"")));
            if worker == &first && task["context"] == "REGULAR" {
                regular_by_first.push(doc_id);
            } else if task["context"] == "REGULAR" && regular_by_first.contains(&doc_id) {
                assert_eq!(feedback["kind"], "PEER");
                let peers = feedback["peer_spans"].as_object().unwrap();
                assert_eq!(peers.len(), 1);
                assert!(peers.keys().all(|k| k.starts_with("peer-")));
            }
        }
        // training plus every non-training document
        assert_eq!(n, 9, "{worker}");
    }

    let (status, sweep) = call(&app, "GET", "/admin/sweep?k_max=3", None).await;
    assert_eq!(status, StatusCode::OK);
    let rows = sweep.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[0]["k"].as_u64(), rows[0]["f1"].as_f64()), (Some(1), Some(1.0)));
    // two voters never reach three votes: every non-training mention is missed
    assert_eq!((rows[2]["tp"].as_u64(), rows[2]["fn"].as_u64()), (Some(0), Some(40)));

    let (status, _) = call(&app, "GET", "/admin/redundancy?n_max=2&reps=3", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, curve) = call(&app, "GET", "/admin/redundancy?n_max=2&reps=3&seed=5", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(curve.as_array().unwrap().len(), 2);
    assert_eq!(curve[1]["stddev_max_f"], 0.0);

    let (status, cost) = call(&app, "GET", "/admin/cost", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(cost["trained_workers"], 2);
    assert_eq!(cost["paid_documents"], 5);
    // 2 × 0.30 + 5 × 2 × 0.06
    assert_eq!(cost["total"], "1.20");
}

#[tokio::test]
async fn state_survives_a_restart() {
    let fx = fixture(15);
    let before = app(&fx.config);
    let id = onboard(&before, "a").await;
    let (_, task) = call(&before, "GET", &format!("/workers/{id}/next-task"), None).await;
    let doc_id = task["doc_id"].as_str().unwrap().to_string();
    let request = json!({"request_token": "t-1", "doc_id": doc_id, "spans": []});
    let (_, feedback) = call(&before, "POST", &format!("/workers/{id}/submissions"), Some(request.clone())).await;
    let events = kinds(&fx.config.log).len();
    drop(before);

    let after = app(&fx.config);
    let (status, status_body) = call(&after, "GET", &format!("/workers/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(status_body["state"], "TRAINING(1)");
    let (_, retry) = call(&after, "POST", &format!("/workers/{id}/submissions"), Some(request)).await;
    assert_eq!(retry, feedback);
    assert_eq!(kinds(&fx.config.log).len(), events);
    let (_, next) = call(&after, "GET", &format!("/workers/{id}/next-task"), None).await;
    assert_ne!(next["doc_id"], doc_id.as_str());
}

#[tokio::test]
async fn missing_corpus_fails_at_startup() {
    let fx = fixture(15);
    let config = ApiConfig { corpus: fx.config.log.with_file_name("absent.txt"), ..fx.config.clone() };
    assert!(matches!(AppState::from_config(&config), Err(ServerError::CorpusLoadError { .. })));
    let config = ApiConfig { redundancy_target: 0, ..fx.config.clone() };
    assert!(matches!(AppState::from_config(&config), Err(ServerError::InvalidConfig(_))));
}

#[tokio::test]
async fn serves_over_tcp_and_flushes_on_shutdown() {
    let fx = fixture(15);
    let state = Arc::new(AppState::from_config(&fx.config).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_on(listener, state, async {
        let _ = stopped.await;
    }));

    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(b"GET /health HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).await.unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.ends_with("ok"));

    stop.send(()).unwrap();
    server.await.unwrap().unwrap();

    let taken = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let config = ApiConfig { listen: taken.local_addr().unwrap().to_string(), ..fx.config.clone() };
    assert!(matches!(crowdspan_server::serve(config).await, Err(ServerError::BindFailure { .. })));
}
