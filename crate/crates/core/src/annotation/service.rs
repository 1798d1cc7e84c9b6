//! HTTP API for the annotation interface.
//!
//! | route | response |
//! |---|---|
//! | `GET /api/tasks/next?worker=<id>` | next [`TaskView`] for the worker, or 204 |
//! | `POST /api/judgments` | [`Ack`] for a [`Submission`] |
//! | `GET /api/progress` | [`Progress`] |
//! | `GET /api/export/qrels` | TREC qrels of every fully judged pair |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::store::{Ack, JudgmentStore, Label, Progress};
use super::tasks::{AnnotationTask, TaskDoc};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeDescription {
    pub grade: u8,
    pub label: String,
    pub description: String,
}

/// The four-point relevance scale shown beside every document.
pub fn grade_scale() -> Vec<GradeDescription> {
    [
        (0, "irrelevant", "the document has nothing to do with the query"),
        (
            1,
            "weakly related",
            "the document seems related to the query but fails to contain any evidence in the summary",
        ),
        (
            2,
            "related",
            "the document provides unclear information related to the query, but human inference may be needed",
        ),
        (
            3,
            "relevant",
            "the document explicitly contains evidence that is part of the summary",
        ),
    ]
    .into_iter()
    .map(|(grade, label, description)| GradeDescription {
        grade,
        label: label.to_string(),
        description: description.to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub query_id: String,
    pub query_text: String,
    pub reference_summary: String,
    pub documents: Vec<TaskDoc>,
    pub scale: Vec<GradeDescription>,
}

impl From<&AnnotationTask> for TaskView {
    fn from(t: &AnnotationTask) -> Self {
        TaskView {
            task_id: t.task_id.clone(),
            query_id: t.query_id.clone(),
            query_text: t.query_text.clone(),
            reference_summary: t.reference_summary.clone(),
            documents: t.docs.clone(),
            scale: grade_scale(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Submission {
    pub worker_id: String,
    pub task_id: String,
    pub labels: Vec<Label>,
}

#[derive(Debug, Deserialize)]
struct NextParams {
    worker: String,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::UnknownTask(_) | Error::ChunkNotInTask { .. } => StatusCode::NOT_FOUND,
            Error::GradeOutOfRange(_) | Error::IncompleteSubmission { .. } | Error::Invalid(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(store: Arc<JudgmentStore>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/judgments", post(post_judgments))
        .route("/api/progress", get(progress))
        .route("/api/export/qrels", get(export_qrels))
        .with_state(store)
}

async fn next_task(
    State(store): State<Arc<JudgmentStore>>,
    Query(params): Query<NextParams>,
) -> Response {
    match store.next_task(&params.worker) {
        Some(task) => Json(TaskView::from(task)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_judgments(
    State(store): State<Arc<JudgmentStore>>,
    Json(sub): Json<Submission>,
) -> std::result::Result<Json<Ack>, ApiError> {
    // Submissions fsync the log; keep that off the async workers.
    let ack = tokio::task::spawn_blocking(move || {
        let task = store
            .task(&sub.task_id)
            .ok_or_else(|| Error::UnknownTask(sub.task_id.clone()))?;
        let labeled = sub
            .labels
            .iter()
            .filter(|l| task.contains(&l.chunk_id))
            .count();
        if labeled < task.docs.len() {
            return Err(Error::IncompleteSubmission {
                task_id: sub.task_id.clone(),
                missing: task.docs.len() - labeled,
            });
        }
        store.submit(&sub.worker_id, &sub.task_id, &sub.labels)
    })
    .await
    .map_err(|e| ApiError(Error::Invalid(format!("submission worker failed: {e}"))))?
    .map_err(ApiError)?;
    Ok(Json(ack))
}

async fn progress(State(store): State<Arc<JudgmentStore>>) -> Json<Progress> {
    Json(store.progress())
}

async fn export_qrels(State(store): State<Arc<JudgmentStore>>) -> impl IntoResponse {
    let text = store.aggregate().qrels.to_trec();
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text)
}

/// Serves the API on `addr` until the process is stopped.
pub fn serve_blocking(store: Arc<JudgmentStore>, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Invalid(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Invalid(format!("bind {addr}: {e}")))?;
        log::info!("annotation service listening on http://{addr}");
        axum::serve(listener, router(store))
            .await
            .map_err(|e| Error::Invalid(format!("server: {e}")))
    })
}
