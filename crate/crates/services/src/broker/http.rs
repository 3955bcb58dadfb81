//! Broker routes:
//! * `POST /v2/entities` `{"id","type","attrs":{name: value}}` → 201 created | 204 updated
//! * `GET /v2/entities/{id}` → 200 entity | 404
//! * `POST /v2/subscriptions` `{"pattern","attrs","callback"}` → 201 `{"sub_id"}`
//! * `GET /v2/subscriptions`, `GET /v2/stats`

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{BrokerError, ContextBroker};
use crate::http::ApiError;

#[derive(Debug, Deserialize)]
struct UpsertBody {
    id: String,
    #[serde(rename = "type")]
    entity_type: String,
    attrs: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct SubscribeBody {
    pattern: String,
    #[serde(default)]
    attrs: Option<BTreeSet<String>>,
    callback: String,
}

impl IntoResponse for BrokerError {
    fn into_response(self) -> Response {
        let err = match &self {
            BrokerError::Malformed(_) | BrokerError::TypeMismatch { .. } => {
                ApiError::bad_request("malformed-request")
            }
            BrokerError::InvalidCallback(_) => ApiError::bad_request("invalid-callback"),
            BrokerError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not-found"),
            BrokerError::Persistence(e) => {
                tracing::error!(error = %e, "state log write failed");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "persistence")
            }
        };
        err.into_response()
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, BrokerError> {
    serde_json::from_slice(body).map_err(|e| BrokerError::Malformed(e.to_string()))
}

pub fn router(broker: Arc<ContextBroker>) -> Router {
    Router::new()
        .route("/v2/entities", post(upsert))
        .route("/v2/entities/:id", get(query))
        .route("/v2/subscriptions", post(subscribe).get(list_subscriptions))
        .route("/v2/stats", get(stats))
        .route("/health", get(|| async { "ok" }))
        .with_state(broker)
}

async fn upsert(State(broker): State<Arc<ContextBroker>>, body: Bytes) -> Result<StatusCode, BrokerError> {
    let body: UpsertBody = parse(&body)?;
    let ack = broker.upsert_entity(&body.id, &body.entity_type, body.attrs)?;
    Ok(if ack.created {
        StatusCode::CREATED
    } else {
        StatusCode::NO_CONTENT
    })
}

async fn query(
    State(broker): State<Arc<ContextBroker>>,
    Path(id): Path<String>,
) -> Result<Json<super::Entity>, BrokerError> {
    broker.query_entity(&id).map(Json)
}

async fn subscribe(
    State(broker): State<Arc<ContextBroker>>,
    body: Bytes,
) -> Result<(StatusCode, Json<serde_json::Value>), BrokerError> {
    let body: SubscribeBody = parse(&body)?;
    let sub_id = broker.create_subscription(&body.pattern, body.attrs, &body.callback)?;
    Ok((StatusCode::CREATED, Json(json!({ "sub_id": sub_id }))))
}

async fn list_subscriptions(State(broker): State<Arc<ContextBroker>>) -> Json<Vec<super::Subscription>> {
    Json(broker.subscriptions())
}

async fn stats(State(broker): State<Arc<ContextBroker>>) -> Json<super::DeliveryStats> {
    Json(broker.stats())
}
