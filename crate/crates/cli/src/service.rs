//! HTTP front end of the exploration service. Bodies are JSON.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use siting_core::domain::ParcelId;
use siting_core::explore::{Explorer, ReoptimizeRequest};
use siting_core::Error;

pub struct ApiError {
    status: StatusCode,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            field: Some(field.into()),
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            field: None,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            // Explorer messages lead with the offending field: "lambda: ...".
            Error::InvalidArgument(m) => {
                let field = m.split_once(':').map(|(f, _)| f.trim().to_string());
                Self {
                    status: StatusCode::BAD_REQUEST,
                    field: field.filter(|f| !f.contains(' ')),
                    message: m,
                }
            }
            Error::Infeasible(m) => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                field: None,
                message: m,
            },
            other => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                field: None,
                message: other.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
    records: usize,
    parcels: usize,
}

#[derive(Serialize)]
struct ArchiveEntry {
    id: usize,
    policy: usize,
    epoch: usize,
    objectives: siting_core::domain::ObjectiveVector,
    normalized: siting_core::domain::ObjectiveVector,
    preference: siting_core::domain::PreferenceVector,
    portfolio: Vec<ParcelId>,
}

#[derive(Deserialize)]
struct ParcelQuery {
    ids: Option<String>,
}

async fn health(State(ex): State<Arc<Explorer>>) -> Json<Health> {
    Json(Health {
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
        records: ex.archive.len(),
        parcels: ex.city.n(),
    })
}

async fn archive(State(ex): State<Arc<Explorer>>) -> Json<Vec<ArchiveEntry>> {
    Json(
        ex.archive
            .records()
            .iter()
            .map(|r| ArchiveEntry {
                id: r.id,
                policy: r.policy,
                epoch: r.epoch,
                objectives: r.objectives,
                normalized: r.normalized,
                preference: r.preference,
                portfolio: r.portfolio.clone(),
            })
            .collect(),
    )
}

async fn parcels(State(ex): State<Arc<Explorer>>, Query(q): Query<ParcelQuery>) -> Result<Response, ApiError> {
    let raw = q.ids.ok_or_else(|| ApiError::bad_request("ids", "missing `ids` query parameter"))?;
    let ids = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map(ParcelId)
                .map_err(|_| ApiError::bad_request("ids", format!("`{s}` is not a parcel id")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(bad) = ids.iter().find(|id| id.index() >= ex.city.n()) {
        return Err(ApiError::not_found(format!("unknown parcel {bad}")));
    }
    Ok(Json(ex.parcels(&ids)?).into_response())
}

async fn reoptimize(State(ex): State<Arc<Explorer>>, body: Bytes) -> Result<Response, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let req: ReoptimizeRequest = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::bad_request(field, e.inner().to_string())
    })?;
    let ex = ex.clone();
    // Scoring is CPU-bound; keep it off the I/O threads.
    let rec = tokio::task::spawn_blocking(move || ex.reoptimize(&req))
        .await
        .map_err(|e| ApiError::from(Error::Training(e.to_string())))??;
    Ok(Json(rec).into_response())
}

async fn explain(State(ex): State<Arc<Explorer>>, Path(record): Path<String>) -> Result<Response, ApiError> {
    let id: usize = record
        .parse()
        .map_err(|_| ApiError::bad_request("record", format!("`{record}` is not a record id")))?;
    if ex.archive.get(id).is_none() {
        return Err(ApiError::not_found(format!("unknown record {id}")));
    }
    Ok(Json(json!({ "record": id, "parcels": ex.explain(id)? })).into_response())
}

pub fn router(explorer: Arc<Explorer>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/archive", get(archive))
        .route("/parcels", get(parcels))
        .route("/reoptimize", post(reoptimize))
        .route("/explain/{record}", get(explain))
        .with_state(explorer)
}
