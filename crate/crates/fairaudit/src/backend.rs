//! Uniform client interface to model endpoints: a retrying HTTP client for
//! chat-completion APIs, a deterministic mock backend for offline runs, and a
//! content-addressed on-disk response cache.

mod cache;
mod http;
mod limiter;
mod mock;

pub use cache::{CachedResponse, ResponseCache};
pub use http::{EndpointConfig, HttpBackend, RetryPolicy};
pub use limiter::RateLimiter;
pub use mock::{mock_complete, mock_predict, MockBackend, MockBiasProfile, RateDelta};

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::TaskKind;
use crate::taxonomy::EnrichedSample;

/// Decoding parameters sent with each request. Greedy decoding (temperature
/// exactly 0) is the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sequences: Option<Vec<String>>,
}

impl GenerationParams {
    pub fn new(model_name: &str) -> Self {
        GenerationParams {
            model_name: model_name.to_string(),
            temperature: 0.0,
            max_tokens: 512,
            stop_sequences: None,
        }
    }
}

/// One model response with transport metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub text: String,
    pub latency: Duration,
    pub from_cache: bool,
    pub attempt_count: u32,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication rejected by endpoint (status {status})")]
    Auth { status: u16 },
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("prompt exceeds the endpoint context window: {detail}")]
    OversizePrompt { detail: String },
    #[error("endpoint returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("request budget exhausted")]
    BudgetExhausted,
    #[error("cache io error: {0}")]
    Cache(#[from] std::io::Error),
    #[error("invalid mock profile: {0}")]
    InvalidProfile(String),
}

impl BackendError {
    /// Fatal errors abort the whole audit rather than one request.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            BackendError::Auth { .. } | BackendError::MissingCredential(_)
        )
    }
}

/// Everything a backend may need for one completion. The HTTP backend uses
/// the prompt and params; the mock uses the enriched sample and task.
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub params: &'a GenerationParams,
    pub enriched: &'a EnrichedSample,
    pub task: &'a TaskKind,
}

/// A live endpoint or the deterministic mock.
pub enum Backend {
    Http(HttpBackend),
    Mock(MockBackend),
}

impl Backend {
    pub fn complete(&self, req: &CompletionRequest<'_>) -> Result<BackendResponse, BackendError> {
        match self {
            Backend::Http(http) => http.complete(req.prompt, req.params),
            Backend::Mock(mock) => Ok(mock.complete(req.enriched, req.task)),
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, Backend::Mock(_))
    }
}

/// Stable cryptographic digest over (model name, prompt bytes, temperature,
/// max tokens, stop sequences). Identical inputs give identical keys across
/// processes.
pub fn cache_key(prompt: &str, params: &GenerationParams) -> String {
    cache_key_salted(prompt, params, 0)
}

/// Cache key with a salt mixed in. Repeated runs of one audit salt the key
/// with the run index, so the runs stay distinct yet individually cacheable.
pub fn cache_key_salted(prompt: &str, params: &GenerationParams, salt: u64) -> String {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(params.model_name.as_bytes());
    field(prompt.as_bytes());
    field(&params.temperature.to_bits().to_le_bytes());
    field(&params.max_tokens.to_le_bytes());
    match &params.stop_sequences {
        None => field(b"-"),
        Some(seqs) => {
            field(&(seqs.len() as u64).to_le_bytes());
            for s in seqs {
                field(s.as_bytes());
            }
        }
    }
    field(&salt.to_le_bytes());
    hex::encode(hasher.finalize())
}
