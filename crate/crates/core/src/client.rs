// SPDX-License-Identifier: Apache-2.0

//! HTTP client for the northbound API.

use std::net::IpAddr;
use std::time::Duration;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::api::{
    ArpAnswer, AssociationRequest, Created, EndpointAck, EndpointRequest, ErrorBody, L2vpnDoc,
    L2vpnRequest, RpDoc, RpRequest,
};
use crate::model::{EviId, MacAddr, RpId};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach controller at {addr}: {source}")]
    Transport { addr: String, source: reqwest::Error },
    #[error("HTTP {status}: {body}")]
    Api { status: StatusCode, body: Value },
    #[error("unexpected response body: {0}")]
    Decode(#[from] serde_json::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn error_body(&self) -> Option<ErrorBody> {
        match self {
            ClientError::Api { body, .. } => serde_json::from_value(body.clone()).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ApiClient {
    addr: String,
    http: reqwest::Client,
}

impl ApiClient {
    /// `addr` is `host:port`, optionally prefixed with `http://`.
    pub fn new(addr: &str) -> Self {
        let addr = if addr.starts_with("http://") || addr.starts_with("https://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{addr}")
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("HTTP client configuration is static");
        Self { addr, http }
    }

    pub fn base_url(&self) -> &str {
        &self.addr
    }

    /// Sends a request and returns the raw JSON body of a successful reply
    /// (`null` for empty bodies).
    pub async fn raw(&self, method: Method, path: &str, body: Option<&impl Serialize>) -> Result<Value, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.addr));
        if let Some(b) = body {
            req = req.json(b);
        }
        let transport = |source| ClientError::Transport { addr: self.addr.clone(), source };
        let resp = req.send().await.map_err(transport)?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(transport)?;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        if status.is_success() {
            Ok(value)
        } else {
            Err(ClientError::Api { status, body: value })
        }
    }

    async fn typed<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&impl Serialize>,
    ) -> Result<T, ClientError> {
        Ok(serde_json::from_value(self.raw(method, path, body).await?)?)
    }

    pub async fn create_l2vpn(&self, req: &L2vpnRequest) -> Result<Created, ClientError> {
        self.typed(Method::POST, "/v1/l2vpn", Some(req)).await
    }

    pub async fn l2vpn(&self, id: EviId) -> Result<L2vpnDoc, ClientError> {
        self.typed(Method::GET, &format!("/v1/l2vpn/{id}"), None::<&()>).await
    }

    pub async fn l2vpns(&self) -> Result<Vec<L2vpnDoc>, ClientError> {
        self.typed(Method::GET, "/v1/l2vpn", None::<&()>).await
    }

    pub async fn delete_l2vpn(&self, id: EviId) -> Result<(), ClientError> {
        self.raw(Method::DELETE, &format!("/v1/l2vpn/{id}"), None::<&()>).await.map(|_| ())
    }

    pub async fn create_rp(&self, req: &RpRequest) -> Result<Created, ClientError> {
        self.typed(Method::POST, "/v1/rp", Some(req)).await
    }

    pub async fn rp(&self, id: RpId) -> Result<RpDoc, ClientError> {
        self.typed(Method::GET, &format!("/v1/rp/{id}"), None::<&()>).await
    }

    pub async fn rps(&self) -> Result<Vec<RpDoc>, ClientError> {
        self.typed(Method::GET, "/v1/rp", None::<&()>).await
    }

    pub async fn associate(&self, evi_id: EviId, rp_id: RpId) -> Result<(), ClientError> {
        let body = AssociationRequest { evi_id: Some(evi_id), rp_id };
        self.raw(Method::PUT, &format!("/v1/l2vpn/{evi_id}/rp"), Some(&body)).await.map(|_| ())
    }

    pub async fn arp_query(&self, evi_id: EviId, ip: IpAddr) -> Result<ArpAnswer, ClientError> {
        self.typed(Method::GET, &format!("/v1/arp?evi={evi_id}&ip={ip}"), None::<&()>).await
    }

    pub async fn endpoint_up(&self, mac: MacAddr, ip: Option<IpAddr>, network_id: &str) -> Result<EndpointAck, ClientError> {
        let body = EndpointRequest { mac, ip, network_id: network_id.into() };
        self.typed(Method::POST, "/v1/endpoints", Some(&body)).await
    }

    pub async fn endpoint_down(&self, mac: MacAddr, network_id: &str) -> Result<EndpointAck, ClientError> {
        let body = EndpointRequest { mac, ip: None, network_id: network_id.into() };
        self.typed(Method::DELETE, "/v1/endpoints", Some(&body)).await
    }

    pub async fn stats(&self) -> Result<Value, ClientError> {
        self.raw(Method::GET, "/v1/stats", None::<&()>).await
    }
}
