//! HTTP JSON API over a [`ReviewStore`].

use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{QualityLabel, ReviewError, ReviewStore};
use crate::canonicalize::BBox;
use crate::corpus::InstructionSample;
use crate::genclient::mime_for;
use crate::types::{Modality, Verdict};

pub const REVIEWER_HEADER: &str = "x-reviewer";
const DEFAULT_BATCH: usize = 10;
const MAX_BATCH: usize = 100;

type Shared = Arc<ReviewStore>;

struct ApiError(StatusCode, &'static str, String);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (status, code) = match &e {
            ReviewError::UnknownDataset(_) => (StatusCode::NOT_FOUND, "unknown_dataset"),
            ReviewError::EndOfSubset { .. } => (StatusCode::RANGE_NOT_SATISFIABLE, "end_of_subset"),
            ReviewError::InsufficientReview { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_review"),
            ReviewError::NoVerdict(_) => (StatusCode::NOT_FOUND, "no_verdict"),
            ReviewError::InvalidLabel(_) => (StatusCode::BAD_REQUEST, "invalid_label"),
            ReviewError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        ApiError(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

#[derive(Serialize)]
struct DatasetInfo {
    name: String,
    samples: usize,
    subset_size: usize,
    reviewers: usize,
    aggregate: Option<Verdict>,
}

async fn list_datasets(State(store): State<Shared>) -> Json<serde_json::Value> {
    let datasets: Vec<DatasetInfo> = store
        .data()
        .datasets()
        .map(|(name, samples)| {
            let agg = store.aggregate(name);
            DatasetInfo {
                name: name.to_string(),
                samples,
                subset_size: store.subset(name).map(|s| s.len()).unwrap_or(0),
                reviewers: agg.map(|a| a.1).unwrap_or(0),
                aggregate: agg.map(|a| a.0),
            }
        })
        .collect();
    Json(json!({
        "min_samples_seen": store.policy().min_samples_seen,
        "datasets": datasets,
    }))
}

#[derive(Deserialize)]
struct BatchQuery {
    cursor: Option<usize>,
    size: Option<usize>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    record_id: &'a str,
    source_dataset: &'a str,
    modality: Option<Modality>,
    label: Option<&'a str>,
    department: Option<&'a str>,
    bbox: Option<BBox>,
}

#[derive(Serialize)]
struct BatchItem<'a> {
    sample: &'a InstructionSample,
    provenance: Provenance<'a>,
    image_url: Option<String>,
}

async fn batch(
    State(store): State<Shared>,
    Path(name): Path<String>,
    Query(q): Query<BatchQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let cursor = q.cursor.unwrap_or(0);
    let size = q.size.unwrap_or(DEFAULT_BATCH).clamp(1, MAX_BATCH);
    let page = store.next_batch(&name, size, cursor)?;
    let items: Vec<BatchItem> = page
        .samples
        .iter()
        .map(|s| {
            let rec = store.data().record(&s.source_record_id);
            BatchItem {
                sample: s,
                provenance: Provenance {
                    record_id: &s.source_record_id,
                    source_dataset: &s.source_dataset,
                    modality: rec.map(|r| r.modality),
                    label: rec.map(|r| r.label.as_str()),
                    department: rec.and_then(|r| r.department.as_deref()),
                    bbox: rec.and_then(|r| r.bbox),
                },
                image_url: s.image_ref.as_ref().map(|_| format!("/images/{}", s.source_record_id)),
            }
        })
        .collect();
    Ok(Json(json!({
        "dataset_name": name,
        "cursor": cursor,
        "next_cursor": page.next_cursor,
        "subset_size": page.subset_len,
        "min_samples_seen": store.policy().min_samples_seen,
        "items": items,
    })))
}

async fn image(State(store): State<Shared>, Path(record_id): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, "unknown_image", format!("no image for record {record_id}"));
    let path = store.data().image_path(&record_id).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, mime_for(&path))], bytes).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    dataset_name: String,
    #[serde(default)]
    reviewer: Option<String>,
    verdict: Verdict,
    sample_ids_seen: Vec<String>,
    #[serde(default)]
    note: Option<String>,
}

async fn submit(
    State(store): State<Shared>,
    headers: HeaderMap,
    Json(body): Json<LabelBody>,
) -> Result<Json<super::Ack>, ApiError> {
    let from_header = headers
        .get(REVIEWER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let reviewer = match (from_header, body.reviewer) {
        (Some(h), Some(b)) if h != b => {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                "invalid_label",
                "reviewer header and body disagree".into(),
            ))
        }
        (Some(r), _) | (None, Some(r)) => r,
        (None, None) => {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                "invalid_label",
                format!("reviewer missing; send the `{REVIEWER_HEADER}` header"),
            ))
        }
    };
    let label = QualityLabel {
        dataset_name: body.dataset_name,
        reviewer,
        verdict: body.verdict,
        sample_ids_seen: body.sample_ids_seen,
        timestamp: Utc::now(),
        note: body.note,
    };
    let ack = tokio::task::spawn_blocking(move || store.submit_label(label))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(ack))
}

async fn decision(
    State(store): State<Shared>,
    Path(name): Path<String>,
) -> Result<Json<super::RetentionDecision>, ApiError> {
    Ok(Json(store.decision(&name)?))
}

pub fn router(store: Arc<ReviewStore>) -> Router {
    Router::new()
        .route("/datasets", get(list_datasets))
        .route("/datasets/{name}/batch", get(batch))
        .route("/datasets/{name}/decision", get(decision))
        .route("/images/{record_id}", get(image))
        .route("/labels", post(submit))
        .with_state(store)
}

/// Serve until `shutdown` resolves. Label writes are flushed per request, so
/// nothing is pending once in-flight requests drain.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<ReviewStore>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store))
        .with_graceful_shutdown(shutdown)
        .await
}
