//! Vision-language generation client.
//!
//! [`GenerationClient`] drives a pluggable [`Backend`] with bounded
//! parallelism, a shared sliding-window rate limiter, and exponential-backoff
//! retries on transient failures. Results of batch calls come back in
//! submission order.

mod http;
mod limiter;
mod mock;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use futures::stream::{self, Stream, StreamExt};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use http::{parse_completion, HttpBackend};
pub use limiter::RateLimiter;
pub use mock::{
    mock_generation_text, mock_token, mock_translation, strip_mock_translation, MockBackend,
    MOCK_BACKEND,
};

use crate::composer::round_half_up;
use crate::digest::named_rng;
use crate::promptgen::GenerationRequest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub model_name: String,
    pub max_parallel: u32,
    pub requests_per_minute: u32,
    pub max_retries: u32,
    pub timeout_seconds: f64,
    pub temperature: f64,
    /// First retry delay; each further retry doubles it.
    pub backoff_base_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            model_name: "gpt-4o".into(),
            max_parallel: 8,
            requests_per_minute: 500,
            max_retries: 5,
            timeout_seconds: 120.0,
            temperature: 0.7,
            backoff_base_ms: 1000,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.max_parallel < 1 {
            return bad("max_parallel must be >= 1");
        }
        if self.requests_per_minute < 1 {
            return bad("requests_per_minute must be >= 1");
        }
        if !(self.timeout_seconds > 0.0 && self.timeout_seconds.is_finite()) {
            return bad("timeout_seconds must be positive");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be in [0, 2]");
        }
        if self.backoff_base_ms < 1 {
            return bad("backoff_base_ms must be >= 1");
        }
        Ok(())
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Ok,
    Truncated,
    Refused,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub request_id: String,
    pub text: String,
    pub backend: String,
    pub latency_ms: u64,
    pub attempt: u32,
    pub finish_reason: FinishReason,
}

/// Base64 image attached to a call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub mime: &'static str,
    pub base64: String,
}

impl ImagePayload {
    pub fn from_file(path: &Path) -> Result<Self, GenError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GenError::Image(format!("{}: {e}", path.display())))?;
        Ok(ImagePayload {
            mime: mime_for(path),
            base64: STANDARD.encode(bytes),
        })
    }

    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.mime, self.base64)
    }
}

/// Content type from a file extension.
pub fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("tif" | "tiff") => "image/tiff",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone)]
pub enum BackendCall<'a> {
    Generate {
        request: &'a GenerationRequest,
        image: Option<&'a ImagePayload>,
    },
    Translate {
        key: &'a str,
        text: &'a str,
        prompt: String,
    },
}

impl BackendCall<'_> {
    pub fn request_id(&self) -> &str {
        match self {
            BackendCall::Generate { request, .. } => &request.request_id,
            BackendCall::Translate { key, .. } => key,
        }
    }

    pub fn prompt(&self) -> &str {
        match self {
            BackendCall::Generate { request, .. } => &request.prompt_text,
            BackendCall::Translate { prompt, .. } => prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("rate limited by backend")]
    RateLimited,
    #[error("backend timed out")]
    Timeout,
    #[error("backend server error {0}")]
    Server(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend rejected the request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited
                | BackendError::Timeout
                | BackendError::Server(_)
                | BackendError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GenError {
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("backend refused the request: {0}")]
    BackendRefusal(String),
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("backend unavailable after {attempts} attempts: {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("image: {0}")]
    Image(String),
    #[error("client configuration: {0}")]
    Config(String),
}

impl GenError {
    fn from_backend(err: BackendError, attempts: u32) -> Self {
        match err {
            BackendError::RateLimited => GenError::RateLimited { attempts },
            BackendError::Timeout => GenError::Timeout { attempts },
            BackendError::Server(s) => GenError::Unavailable {
                attempts,
                reason: format!("server error {s}"),
            },
            BackendError::Transport(reason) => GenError::Unavailable { attempts, reason },
            BackendError::Rejected { status, body } => {
                GenError::BackendRefusal(format!("{status}: {body}"))
            }
            BackendError::Malformed(m) => GenError::MalformedResponse(m),
            BackendError::Config(m) => GenError::Config(m),
        }
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    /// Whether calls should carry the encoded image.
    fn wants_image(&self) -> bool;
    async fn complete(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError>;
}

pub fn translation_prompt(text: &str) -> String {
    format!(
        "Translate the following medical text from English into Simplified Chinese. \
         Keep medical terminology precise, keep any \"Q:\" and \"A:\" markers unchanged, \
         and output only the translation.\n\n{text}"
    )
}

#[derive(Clone)]
pub struct GenerationClient {
    backend: Arc<dyn Backend>,
    cfg: ClientConfig,
    limiter: Arc<RateLimiter>,
    inflight: Arc<Semaphore>,
    image_root: PathBuf,
}

impl std::fmt::Debug for GenerationClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GenerationClient")
            .field("backend", &self.backend.name())
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl GenerationClient {
    /// `image_root` is the directory image references are relative to.
    pub fn new(
        backend: Arc<dyn Backend>,
        cfg: ClientConfig,
        image_root: impl Into<PathBuf>,
    ) -> Result<Self, GenError> {
        cfg.validate()?;
        Ok(GenerationClient {
            limiter: Arc::new(RateLimiter::per_minute(cfg.requests_per_minute)),
            inflight: Arc::new(Semaphore::new(cfg.max_parallel as usize)),
            backend,
            cfg,
            image_root: image_root.into(),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    async fn call(&self, call: &BackendCall<'_>) -> Result<(BackendReply, u32), GenError> {
        let _permit = self.inflight.acquire().await.expect("semaphore is never closed");
        let timeout = Duration::from_secs_f64(self.cfg.timeout_seconds);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.limiter.acquire().await;
            let outcome = match tokio::time::timeout(timeout, self.backend.complete(call)).await {
                Ok(r) => r,
                Err(_) => Err(BackendError::Timeout),
            };
            match outcome {
                Ok(reply) => return Ok((reply, attempt)),
                Err(e) if e.is_transient() && attempt <= self.cfg.max_retries => {
                    tracing::debug!(request = call.request_id(), attempt, error = %e, "retrying");
                    tokio::time::sleep(self.cfg.backoff(attempt)).await;
                }
                Err(e) => return Err(GenError::from_backend(e, attempt)),
            }
        }
    }

    /// Generate text for one request.
    pub async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GenError> {
        let image = match &req.image_ref {
            Some(r) => {
                let path = self.image_root.join(r);
                if self.backend.wants_image() {
                    Some(ImagePayload::from_file(&path)?)
                } else if !path.is_file() {
                    return Err(GenError::Image(format!("{} does not exist", path.display())));
                } else {
                    None
                }
            }
            None => None,
        };
        let call = BackendCall::Generate {
            request: req,
            image: image.as_ref(),
        };
        let (reply, attempt) = self.call(&call).await?;
        Ok(GenerationResult {
            request_id: req.request_id.clone(),
            text: reply.text,
            backend: self.backend.name().to_string(),
            latency_ms: reply.latency_ms,
            attempt,
            finish_reason: reply.finish_reason,
        })
    }

    /// Translate English text into Chinese. `key` identifies the call for logs and retries.
    pub async fn translate(&self, key: &str, text: &str) -> Result<String, GenError> {
        let call = BackendCall::Translate {
            key,
            text,
            prompt: translation_prompt(text),
        };
        let (reply, _) = self.call(&call).await?;
        match reply.finish_reason {
            FinishReason::Ok => Ok(reply.text),
            FinishReason::Refused => Err(GenError::BackendRefusal("translation refused".into())),
            FinishReason::Truncated => Err(GenError::MalformedResponse("translation truncated".into())),
        }
    }

    /// Run requests with at most `max_parallel` in flight; items come back in submission order.
    pub fn generate_ordered<'a>(
        &'a self,
        requests: &'a [GenerationRequest],
    ) -> impl Stream<Item = (usize, Result<GenerationResult, GenError>)> + 'a {
        stream::iter(requests.iter().enumerate())
            .map(move |(i, req)| async move { (i, self.generate(req).await) })
            .buffered(self.cfg.max_parallel as usize)
    }

    pub async fn generate_all(
        &self,
        requests: &[GenerationRequest],
    ) -> Vec<Result<GenerationResult, GenError>> {
        self.generate_ordered(requests).map(|(_, r)| r).collect().await
    }
}

/// Exactly `round(n * fraction)` distinct indices out of `0..n`, chosen by seeded sampling.
pub fn select_for_translation(n: usize, fraction: f64, seed: u64) -> BTreeSet<usize> {
    let k = (round_half_up(n as f64 * fraction.clamp(0.0, 1.0)) as usize).min(n);
    let mut rng = named_rng(seed, "translate");
    index::sample(&mut rng, n, k).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_strictly_increases() {
        let cfg = ClientConfig::default();
        let delays: Vec<_> = (1..=8).map(|r| cfg.backoff(r)).collect();
        assert!(delays.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(delays[0], Duration::from_millis(1000));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ClientConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.temperature = 2.5;
        assert!(cfg.validate().is_err());
        cfg = ClientConfig {
            max_parallel: 0,
            ..ClientConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn translation_selection_is_exact_and_seeded() {
        let picked = select_for_translation(50, 0.2, 11);
        assert_eq!(picked.len(), 10);
        assert_eq!(picked, select_for_translation(50, 0.2, 11));
        assert!(picked.iter().all(|i| *i < 50));
        assert_eq!(select_for_translation(0, 0.2, 1).len(), 0);
        assert_eq!(select_for_translation(7, 1.0, 1).len(), 7);
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.4999), 2);
        assert_eq!(round_half_up(0.1 * 3.0 * 10.0), 3);
        assert_eq!(round_half_up(468_000.0 * 0.5), 234_000);
    }

    #[test]
    fn mime_by_extension() {
        assert_eq!(mime_for(Path::new("a/b.PNG")), "image/png");
        assert_eq!(mime_for(Path::new("x.jpeg")), "image/jpeg");
    }
}
