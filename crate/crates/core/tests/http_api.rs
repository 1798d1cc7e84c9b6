use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use kiqfs_core::annotation::{
    partition_tasks, router, Ack, JudgmentStore, Pool, PoolDoc, PoolEntry, Progress, TaskView,
};
use kiqfs_core::corpus::{QuerySummaryPair, Split};
use serde_json::{json, Value};
use tower::ServiceExt;

fn pool() -> Pool {
    let docs = |ids: &[&str]| {
        ids.iter()
            .map(|id| PoolDoc {
                chunk_id: id.to_string(),
                text: Some(format!("text of {id}")),
            })
            .collect()
    };
    Pool::from_entries(vec![
        PoolEntry {
            query_id: "q1".into(),
            docs: docs(&["a#0", "b#0", "c#0"]),
        },
        PoolEntry {
            query_id: "q2".into(),
            docs: docs(&["d#0"]),
        },
    ])
    .unwrap()
}

fn pairs() -> Vec<QuerySummaryPair> {
    ["q1", "q2"]
        .iter()
        .map(|q| QuerySummaryPair {
            query_id: q.to_string(),
            query_text: format!("about {q}"),
            references: vec![format!("reference for {q}")],
            split: Split::Test,
        })
        .collect()
}

fn app(dir: &std::path::Path) -> (Router, Arc<JudgmentStore>) {
    let tasks = partition_tasks(&pool(), &pairs(), 5).unwrap();
    let store = Arc::new(JudgmentStore::open(dir, tasks, 3).unwrap());
    (router(store.clone()), store)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(body: Value) -> Request<Body> {
    Request::post("/api/judgments")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn submission(worker: &str, task: &TaskView, grade: i64) -> Value {
    let labels: Vec<Value> = task
        .documents
        .iter()
        .map(|d| json!({"chunk_id": d.chunk_id, "grade": grade}))
        .collect();
    json!({"worker_id": worker, "task_id": task.task_id, "labels": labels})
}

async fn next(app: &Router, worker: &str) -> Option<TaskView> {
    let (status, body) = call(app, get(&format!("/api/tasks/next?worker={worker}"))).await;
    match status {
        StatusCode::OK => Some(serde_json::from_slice(&body).unwrap()),
        StatusCode::NO_CONTENT => None,
        s => panic!("unexpected status {s}"),
    }
}

#[tokio::test]
async fn next_task_carries_scale_and_reference() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let t = next(&app, "w1").await.unwrap();
    assert_eq!(t.task_id, "q1/0");
    assert_eq!(t.reference_summary, "reference for q1");
    assert_eq!(t.documents.len(), 3);
    assert_eq!(t.documents[0].text, "text of a#0");
    let grades: Vec<u8> = t.scale.iter().map(|g| g.grade).collect();
    assert_eq!(grades, [0, 1, 2, 3]);
}

#[tokio::test]
async fn three_workers_complete_the_pool() {
    let dir = tempfile::tempdir().unwrap();
    let (app, store) = app(dir.path());
    for (w, grade) in [("w1", 3), ("w2", 3), ("w3", 1)] {
        while let Some(t) = next(&app, w).await {
            let (status, body) = call(&app, post(submission(w, &t, grade))).await;
            assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
            let ack: Ack = serde_json::from_slice(&body).unwrap();
            assert_eq!(ack.accepted, t.documents.len());
        }
    }
    assert!(
        next(&app, "w4").await.is_none(),
        "fully judged pool has no work left"
    );

    let (status, body) = call(&app, get("/api/progress")).await;
    assert_eq!(status, StatusCode::OK);
    let p: Progress = serde_json::from_slice(&body).unwrap();
    assert_eq!(p.total_pairs, 4);
    assert_eq!(p.judged_pairs, 4);
    assert_eq!(p.per_worker["w1"], 4);

    let (status, body) = call(&app, get("/api/export/qrels")).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("q1 0 a#0 3"));
    assert!(text.contains("q2 0 d#0 3"));
    assert_eq!(store.aggregate().report.aggregated_pairs, 4);
}

#[tokio::test]
async fn out_of_range_grade_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (app, store) = app(dir.path());
    let t = next(&app, "w1").await.unwrap();
    for bad in [4, -1] {
        let (status, body) = call(&app, post(submission("w1", &t, bad))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].as_str().unwrap().contains("grade out of range"));
    }
    assert_eq!(store.progress().per_worker.len(), 0, "nothing was written");
}

#[tokio::test]
async fn incomplete_submission_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let t = next(&app, "w1").await.unwrap();
    let body = json!({
        "worker_id": "w1",
        "task_id": t.task_id,
        "labels": [{"chunk_id": t.documents[0].chunk_id, "grade": 2}],
    });
    let (status, _) = call(&app, post(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unknown_task_and_chunk() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let body = json!({"worker_id": "w1", "task_id": "nope/0", "labels": []});
    assert_eq!(call(&app, post(body)).await.0, StatusCode::NOT_FOUND);
    let body = json!({
        "worker_id": "w1",
        "task_id": "q2/0",
        "labels": [{"chunk_id": "d#0", "grade": 1}, {"chunk_id": "zz#9", "grade": 1}],
    });
    assert_eq!(call(&app, post(body)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn resubmission_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let (app, store) = app(dir.path());
    let t = next(&app, "w1").await.unwrap();
    call(&app, post(submission("w1", &t, 1))).await;
    let (status, body) = call(&app, post(submission("w1", &t, 2))).await;
    assert_eq!(status, StatusCode::OK);
    let ack: Ack = serde_json::from_slice(&body).unwrap();
    assert_eq!(ack.overwritten, 3);
    assert_eq!(store.current_grades("q1", "a#0"), [("w1".to_string(), 2)]);
}

#[tokio::test]
async fn judgments_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let (app, _) = app(dir.path());
        let t = next(&app, "w1").await.unwrap();
        call(&app, post(submission("w1", &t, 2))).await;
    }
    let (app, store) = app(dir.path());
    assert_eq!(store.current_grades("q1", "b#0").len(), 1);
    // The worker moves on to the task it has not judged yet.
    assert_eq!(next(&app, "w1").await.unwrap().task_id, "q2/0");
}

#[tokio::test]
async fn malformed_json_is_a_client_error() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let req = Request::post("/api/judgments")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert!(call(&app, req).await.0.is_client_error());
    assert!(call(&app, get("/api/tasks/next")).await.0.is_client_error());
}
