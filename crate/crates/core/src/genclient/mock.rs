//! Deterministic in-process backend.
//!
//! Generated text is a pure function of the request:
//! `"MOCK:" + first 16 hex chars of sha256(request_id) + " " + label`.
//! Formats that expect question/answer markers wrap that token in `Q:`/`A:`
//! lines (one pair, or two pairs for dialogue). Translation returns
//! `"ZH(" + text + ")"`.

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use async_trait::async_trait;

use super::{Backend, BackendCall, BackendError, BackendReply, FinishReason};
use crate::digest::sha256_hex;
use crate::types::InstructionFormat;

pub const MOCK_BACKEND: &str = "mock";

/// Marker token for a request id.
pub fn mock_token(request_id: &str) -> String {
    format!("MOCK:{}", &sha256_hex(request_id.as_bytes())[..16])
}

pub fn mock_generation_text(request_id: &str, format: InstructionFormat, label: &str) -> String {
    let token = mock_token(request_id);
    match format {
        InstructionFormat::FreeInstruction | InstructionFormat::TextOnly => {
            format!("Q: {token} What does this study show regarding {label}?\nA: {token} {label}")
        }
        InstructionFormat::Dialogue => format!(
            "Q: {token} What is the main finding?\nA: {token} {label}\n\
             Q: {token} Where should attention be focused?\nA: {token} On the area consistent with {label}."
        ),
        _ => format!("{token} {label}"),
    }
}

pub fn mock_translation(text: &str) -> String {
    format!("ZH({text})")
}

/// Inverse of [`mock_translation`].
pub fn strip_mock_translation(text: &str) -> Option<&str> {
    text.strip_prefix("ZH(")?.strip_suffix(')')
}

#[derive(Debug, Default)]
pub struct MockBackend {
    transient_failures: Mutex<HashMap<String, u32>>,
    refusals: HashSet<String>,
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend::default()
    }

    /// Fail the next `n` calls for `request_id` with a rate-limit error.
    pub fn fail_transiently(self, request_id: &str, n: u32) -> Self {
        self.transient_failures
            .lock()
            .expect("mock state")
            .insert(request_id.to_string(), n);
        self
    }

    /// Answer `request_id` with a content refusal.
    pub fn refuse(mut self, request_id: &str) -> Self {
        self.refusals.insert(request_id.to_string());
        self
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn name(&self) -> &str {
        MOCK_BACKEND
    }

    fn wants_image(&self) -> bool {
        false
    }

    async fn complete(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        let key = call.request_id();
        {
            let mut failures = self.transient_failures.lock().expect("mock state");
            if let Some(left) = failures.get_mut(key) {
                if *left > 0 {
                    *left -= 1;
                    return Err(BackendError::RateLimited);
                }
            }
        }
        if self.refusals.contains(key) {
            return Ok(BackendReply {
                text: String::new(),
                finish_reason: FinishReason::Refused,
                latency_ms: 0,
            });
        }
        let text = match call {
            BackendCall::Generate { request, .. } => {
                mock_generation_text(&request.request_id, request.format, &request.label)
            }
            BackendCall::Translate { text, .. } => mock_translation(text),
        };
        Ok(BackendReply {
            text,
            finish_reason: FinishReason::Ok,
            latency_ms: 0,
        })
    }
}
