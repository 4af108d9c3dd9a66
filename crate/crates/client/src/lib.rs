//! Thin async client for the gateway service.

use add_sentinel::gateway::{EngineConfig, EngineStats, QueryRequest, QueryResponse};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Server {
        status: StatusCode,
        kind: String,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Body of every non-2xx response.
#[derive(Debug, Deserialize)]
struct ErrorBody {
    kind: String,
    message: String,
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base_url` like `http://127.0.0.1:8080`.
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_http(reqwest::Client::new(), base_url)
    }

    pub fn with_http(http: reqwest::Client, base_url: impl Into<String>) -> Self {
        let base = base_url.into().trim_end_matches('/').to_string();
        Self { http, base }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let (kind, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.kind, b.message),
            Err(_) => ("unknown".to_string(), text),
        };
        Err(ClientError::Server { status, kind, message })
    }

    pub async fn health(&self) -> Result<()> {
        let resp = self.http.get(self.url("/healthz")).send().await?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Self::decode::<serde::de::IgnoredAny>(resp).await.map(|_| ())
        }
    }

    pub async fn query(&self, request: &QueryRequest) -> Result<QueryResponse> {
        let resp = self.http.post(self.url("/v1/query")).json(request).send().await?;
        Self::decode(resp).await
    }

    pub async fn stats(&self) -> Result<EngineStats> {
        Self::decode(self.http.get(self.url("/v1/stats")).send().await?).await
    }

    pub async fn config(&self) -> Result<EngineConfig> {
        Self::decode(self.http.get(self.url("/v1/config")).send().await?).await
    }
}
