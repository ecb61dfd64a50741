// SPDX-License-Identifier: Apache-2.0

//! REST/JSON northbound API.
//!
//! Handlers parse and validate requests, then forward everything that
//! mutates state to the service bus. Bodies are decoded by hand so that
//! syntax errors (400) can be told apart from schema errors (422).

use std::net::IpAddr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::api::{
    AssociationRequest, Created, EndpointAck, EndpointRequest, ErrorBody, L2vpnRequest, RpRequest,
};
use crate::bgp::session::CounterSnapshot;
use crate::bgp::{SessionState, Speaker};
use crate::model::EviId;
use crate::service::{ServiceError, ServiceHandle, StatsSnapshot};

#[derive(Debug, Clone)]
pub struct ApiState {
    pub service: ServiceHandle,
    pub speaker: Arc<OnceLock<Arc<Speaker>>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<String>) -> Self {
        Self { status, body: ErrorBody { error: error.into(), field } }
    }

    fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"), None)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Exhausted(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Transaction(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        };
        let field = match &e {
            ServiceError::Invalid { field, .. } => field.clone(),
            _ => None,
        };
        Self::new(status, e.to_string(), field)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Extracts the field name serde mentions in messages like "missing field `x`".
fn field_of(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn decode<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => {
                let msg = e.to_string();
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, msg.clone(), field_of(&msg))
            }
            _ => ApiError::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}"), None),
        }
    })
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/v1/l2vpn", post(create_l2vpn).get(list_l2vpn))
        .route("/v1/l2vpn/{id}", get(get_l2vpn).delete(delete_l2vpn))
        .route("/v1/l2vpn/{id}/rp", put(associate))
        .route("/v1/rp", post(create_rp).get(list_rp))
        .route("/v1/rp/{id}", get(get_rp))
        .route("/v1/arp", get(arp_query))
        .route("/v1/endpoints", post(endpoint_up).delete(endpoint_down))
        .route("/v1/stats", get(stats))
        .with_state(state)
}

async fn create_l2vpn(State(s): State<ApiState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let receipt = Instant::now();
    let req: L2vpnRequest = decode(&body)?;
    let id = s.service.create_l2vpn(req, receipt).await?;
    Ok((StatusCode::CREATED, Json(Created { id, receipt_ts_us: s.service.receipt_us(receipt) })))
}

async fn list_l2vpn(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.service.l2vpns())
}

async fn get_l2vpn(State(s): State<ApiState>, Path(id): Path<EviId>) -> ApiResult<impl IntoResponse> {
    s.service.l2vpn(id).map(Json).ok_or_else(|| ApiError::not_found(format!("l2vpn {id}")))
}

async fn delete_l2vpn(State(s): State<ApiState>, Path(id): Path<EviId>) -> ApiResult<StatusCode> {
    s.service.delete_l2vpn(id).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn associate(
    State(s): State<ApiState>,
    Path(id): Path<EviId>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: AssociationRequest = decode(&body)?;
    if req.evi_id.is_some_and(|e| e != id) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "evi_id does not match the path",
            Some("evi_id".into()),
        ));
    }
    s.service.associate_rp(id, req.rp_id).await?;
    Ok(Json(AssociationRequest { evi_id: Some(id), rp_id: req.rp_id }))
}

async fn create_rp(State(s): State<ApiState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let receipt = Instant::now();
    let req: RpRequest = decode(&body)?;
    let id = s.service.create_rp(req, receipt).await?;
    Ok((StatusCode::CREATED, Json(Created { id, receipt_ts_us: s.service.receipt_us(receipt) })))
}

async fn list_rp(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.service.rps())
}

async fn get_rp(State(s): State<ApiState>, Path(id): Path<u32>) -> ApiResult<impl IntoResponse> {
    s.service.rp(id).map(Json).ok_or_else(|| ApiError::not_found(format!("rp {id}")))
}

#[derive(Debug, Deserialize)]
struct ArpParams {
    evi: EviId,
    ip: IpAddr,
}

async fn arp_query(State(s): State<ApiState>, Query(q): Query<ArpParams>) -> impl IntoResponse {
    Json(s.service.arp_query(q.evi, q.ip))
}

async fn endpoint_up(State(s): State<ApiState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: EndpointRequest = decode(&body)?;
    let evi_id = s.service.endpoint_up(req.mac, req.ip, req.network_id).await?;
    Ok(Json(EndpointAck { evi_id }))
}

async fn endpoint_down(State(s): State<ApiState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: EndpointRequest = decode(&body)?;
    let evi_id = s.service.endpoint_down(req.mac, req.network_id).await?;
    Ok(Json(EndpointAck { evi_id }))
}

#[derive(Debug, Serialize)]
pub struct PeerStats {
    pub id: String,
    pub state: SessionState,
    pub counters: CounterSnapshot,
}

#[derive(Debug, Serialize)]
pub struct StatsDoc {
    pub service: StatsSnapshot,
    pub peers: Vec<PeerStats>,
}

async fn stats(State(s): State<ApiState>) -> impl IntoResponse {
    let peers = s
        .speaker
        .get()
        .map(|sp| {
            sp.peers()
                .iter()
                .map(|p| PeerStats { id: p.id().to_string(), state: p.state(), counters: p.counters().snapshot() })
                .collect()
        })
        .unwrap_or_default();
    Json(StatsDoc { service: s.service.stats(), peers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serde_field_names_are_extracted() {
        assert_eq!(field_of("missing field `pe_ids` at line 1 column 2").as_deref(), Some("pe_ids"));
        assert_eq!(field_of("invalid type: string"), None);
    }

    #[test]
    fn syntax_and_schema_errors_differ() {
        let e = decode::<L2vpnRequest>(b"{not json").unwrap_err();
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
        let e = decode::<L2vpnRequest>(br#"{"customer_id":"c"}"#).unwrap_err();
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
        let e = decode::<RpRequest>(br#"{"name":"x","allow_mac_advertisement":1}"#).unwrap_err();
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
    }
}
