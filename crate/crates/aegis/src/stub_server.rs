//! The bundled stub model behind the adapter protocol, for exercising the
//! HTTP adapter end to end.

use std::sync::Arc;

use aegis_core::gateway::{AdapterError, AdapterRequest, ModelAdapter, StubAdapter};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};

pub fn router() -> Router {
    Router::new()
        .route("/predict", post(predict))
        .with_state(Arc::new(StubAdapter::default()))
}

async fn predict(
    State(model): State<Arc<StubAdapter>>,
    Json(req): Json<AdapterRequest>,
) -> Response {
    match model.predict(&req) {
        Ok(out) => Json(out).into_response(),
        Err(AdapterError::Protocol(msg)) => (StatusCode::UNPROCESSABLE_ENTITY, msg).into_response(),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
    }
}
