use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prunenet::dataset::{encode_png, ImageId, ImageSet};
use prunenet::pruning::Verdict;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tower_http::services::ServeDir;

use crate::store::{DecisionStore, Finalized, StatusFilter};
use crate::{timestamp, ReviewError};

/// Shared state behind the HTTP handlers. Decision writes go through one
/// mutex, so journal appends are serialized.
pub struct ReviewService {
    store: Mutex<DecisionStore>,
    pool: ImageSet,
    index: HashMap<ImageId, usize>,
    force_default: bool,
    done: watch::Sender<Option<Finalized>>,
}

impl ReviewService {
    /// `force_default` applies to finalize requests that do not say.
    pub fn new(store: DecisionStore, pool: ImageSet, force_default: bool) -> Arc<Self> {
        let (done, _) = watch::channel(store.finalized().cloned());
        Arc::new(Self {
            index: pool.id_index(),
            store: Mutex::new(store),
            pool,
            force_default,
            done,
        })
    }

    pub fn store(&self) -> MutexGuard<'_, DecisionStore> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Resolves once the review has been finalized.
    pub async fn finalized(&self) -> Finalized {
        let mut rx = self.done.subscribe();
        let value = rx
            .wait_for(|v| v.is_some())
            .await
            .expect("sender lives in self");
        value.clone().expect("waited for Some")
    }
}

struct ApiError(ReviewError);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ReviewError::UnknownId(_) => StatusCode::NOT_FOUND,
            ReviewError::AlreadyFinalized | ReviewError::Incomplete(_) => StatusCode::CONFLICT,
            ReviewError::BadPage { .. } => StatusCode::BAD_REQUEST,
            ReviewError::Io { .. } | ReviewError::Journal { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let mut body = json!({"error": self.0.code(), "message": self.0.to_string()});
        if let ReviewError::Incomplete(ids) = &self.0 {
            body["undecided"] = json!(ids);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Deserialize)]
struct ListQuery {
    page: Option<usize>,
    page_size: Option<usize>,
    class: Option<u8>,
    status: Option<StatusFilter>,
}

async fn list_flagged(
    State(svc): State<Arc<ReviewService>>,
    Query(q): Query<ListQuery>,
) -> ApiResult<impl IntoResponse> {
    let page = svc
        .store()
        .list(q.page.unwrap_or(1), q.page_size.unwrap_or(50), q.class, q.status)?;
    Ok(Json(page))
}

async fn image(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<u64>,
) -> ApiResult<impl IntoResponse> {
    let pos = ImageId::try_from(id)
        .ok()
        .and_then(|id| svc.index.get(&id).copied())
        .ok_or(ReviewError::UnknownId(id.min(ImageId::MAX as u64) as ImageId))?;
    Ok((
        [(header::CONTENT_TYPE, "image/png")],
        encode_png(svc.pool.image(pos)),
    ))
}

#[derive(Deserialize)]
struct DecisionRequest {
    id: ImageId,
    verdict: Verdict,
    #[serde(default)]
    reviewer: Option<String>,
}

async fn decide(
    State(svc): State<Arc<ReviewService>>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<impl IntoResponse> {
    let tally = svc
        .store()
        .decide(req.id, req.verdict, req.reviewer, timestamp())?;
    Ok(Json(json!({"id": req.id, "verdict": req.verdict, "tally": tally})))
}

async fn progress(State(svc): State<Arc<ReviewService>>) -> impl IntoResponse {
    Json(svc.store().tally())
}

#[derive(Deserialize, Default)]
struct FinalizeRequest {
    force_remove_undecided: Option<bool>,
}

async fn finalize(State(svc): State<Arc<ReviewService>>, body: Bytes) -> Response {
    let req: FinalizeRequest = if body.iter().all(u8::is_ascii_whitespace) {
        FinalizeRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => {
                let body = json!({"error": "bad_request", "message": e.to_string()});
                return (StatusCode::BAD_REQUEST, Json(body)).into_response();
            }
        }
    };
    let force = req.force_remove_undecided.unwrap_or(svc.force_default);
    let result = svc.store().finalize(force, timestamp());
    match result {
        Ok(done) => {
            svc.done.send_replace(Some(done.clone()));
            Json(json!({"count": done.removal_ids.len(), "removal_ids": done.removal_ids}))
                .into_response()
        }
        Err(e) => ApiError(e).into_response(),
    }
}

/// API routes, plus static files from `static_dir` for every other path.
pub fn router(svc: Arc<ReviewService>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/flagged", get(list_flagged))
        .route("/api/image/{id}", get(image))
        .route("/api/decision", post(decide))
        .route("/api/progress", get(progress))
        .route("/api/finalize", post(finalize))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the review is finalized, then shuts down gracefully.
pub async fn serve(
    listener: TcpListener,
    svc: Arc<ReviewService>,
    static_dir: Option<PathBuf>,
) -> std::io::Result<Finalized> {
    let app = router(svc.clone(), static_dir);
    let waiter = svc.clone();
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            waiter.finalized().await;
        })
        .await?;
    Ok(svc.finalized().await)
}
