//! Chat-completion style HTTP backend.

use std::time::Instant;

use async_trait::async_trait;
use http_body_util::{BodyExt, Full};
use hyper::body::Bytes;
use hyper::StatusCode;
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use serde_json::{json, Value};

use super::{Backend, BackendCall, BackendError, BackendReply, ClientConfig, FinishReason};

type Connector = hyper_rustls::HttpsConnector<HttpConnector>;

pub struct HttpBackend {
    client: Client<Connector, Full<Bytes>>,
    endpoint: hyper::Uri,
    model: String,
    temperature: f64,
    api_key: String,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    /// Build the backend, reading the bearer token from the configured env var.
    pub fn from_config(cfg: &ClientConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&cfg.api_key_env).map_err(|_| {
            BackendError::Config(format!(
                "environment variable `{}` (api_key_env) is not set",
                cfg.api_key_env
            ))
        })?;
        let endpoint: hyper::Uri = cfg
            .endpoint_url
            .parse()
            .map_err(|e| BackendError::Config(format!("endpoint_url: {e}")))?;
        let connector = hyper_rustls::HttpsConnectorBuilder::new()
            .with_native_roots()
            .map_err(|e| BackendError::Config(format!("loading TLS roots: {e}")))?
            .https_or_http()
            .enable_http1()
            .build();
        Ok(HttpBackend {
            client: Client::builder(TokioExecutor::new()).build(connector),
            endpoint,
            model: cfg.model_name.clone(),
            temperature: cfg.temperature,
            api_key,
        })
    }

    fn payload(&self, call: &BackendCall<'_>) -> Value {
        let mut content = vec![json!({"type": "text", "text": call.prompt()})];
        if let BackendCall::Generate {
            image: Some(image), ..
        } = call
        {
            content.push(json!({"type": "image_url", "image_url": {"url": image.data_url()}}));
        }
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.temperature,
        })
    }
}

/// Extract `choices[0].message.content` and the finish reason.
pub fn parse_completion(body: &[u8]) -> Result<(String, FinishReason), BackendError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| BackendError::Malformed(format!("response is not JSON: {e}")))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Malformed("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Truncated,
        Some("content_filter") => FinishReason::Refused,
        _ if choice.pointer("/message/refusal").is_some_and(|r| !r.is_null()) => FinishReason::Refused,
        _ => FinishReason::Ok,
    };
    if finish == FinishReason::Ok && text.trim().is_empty() {
        return Err(BackendError::Malformed("empty message content".into()));
    }
    Ok((text, finish))
}

#[async_trait]
impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn wants_image(&self) -> bool {
        true
    }

    async fn complete(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        let body = serde_json::to_vec(&self.payload(call)).expect("payload serializes");
        let request = hyper::Request::post(self.endpoint.clone())
            .header(hyper::header::CONTENT_TYPE, "application/json")
            .header(hyper::header::AUTHORIZATION, format!("Bearer {}", self.api_key))
            .body(Full::new(Bytes::from(body)))
            .map_err(|e| BackendError::Config(e.to_string()))?;

        let started = Instant::now();
        let response = self
            .client
            .request(request)
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let bytes = response
            .into_body()
            .collect()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .to_bytes();
        let latency_ms = started.elapsed().as_millis() as u64;

        match status {
            StatusCode::TOO_MANY_REQUESTS => Err(BackendError::RateLimited),
            StatusCode::REQUEST_TIMEOUT => Err(BackendError::Timeout),
            s if s.is_server_error() => Err(BackendError::Server(s.as_u16())),
            s if !s.is_success() => Err(BackendError::Rejected {
                status: s.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(500).collect(),
            }),
            _ => {
                let (text, finish_reason) = parse_completion(&bytes)?;
                Ok(BackendReply {
                    text,
                    finish_reason,
                    latency_ms,
                })
            }
        }
    }
}
