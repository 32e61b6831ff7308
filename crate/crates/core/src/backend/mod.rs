//! Language-model access.
//!
//! [`Backend`] is the raw transport: a remote server speaking the
//! completions/embeddings wire protocol, or the in-process [`MockBackend`].
//! [`Client`] wraps a backend with the request scheduler (bounded
//! concurrency, retry with exponential backoff, round-robin sharding) and the
//! optional content-addressed response cache.

mod cache;
mod client;
mod mock;
mod remote;
mod server;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, ResponseCache};
pub use client::{continuation_scores, BatchOutcome, Client, StatsSnapshot};
pub use mock::{fnv1a64, mock_embedding, mock_logprob, tokenize, CueRule, Fixture, MockBackend, MockModel, MockToken, ScriptedCompletion, ScriptedFailure};
pub use remote::RemoteBackend;
pub use server::{MockServer, ServerStats, ServerError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited (HTTP {0})")]
    RateLimited(u16),
    #[error("server error (HTTP {status}): {excerpt}")]
    Server { status: u16, excerpt: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("token boundary mismatch: {0}")]
    BoundaryMismatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("gave up after {attempts} attempts: {cause}")]
    ExhaustedRetries { attempts: u32, cause: Box<BackendError> },
    #[error("batch {start}..{end} failed: {cause}")]
    InBatch { start: usize, end: usize, cause: Box<BackendError> },
    #[error("backend setup: {0}")]
    Setup(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout
                | BackendError::RateLimited(_)
                | BackendError::Server { .. }
                | BackendError::Transport(_)
        )
    }

    /// Maps an HTTP failure status onto the error taxonomy.
    pub fn from_status(status: u16, body: &str) -> BackendError {
        let excerpt: String = body.chars().take(200).collect();
        match status {
            429 => BackendError::RateLimited(status),
            408 => BackendError::Timeout,
            500..=599 => BackendError::Server { status, excerpt },
            _ => BackendError::Protocol(format!("HTTP {status}: {excerpt}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 200, multiplier: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay before retrying after failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(ms.max(0.0) / 1000.0)
    }
}

fn default_model() -> String {
    "mock".to_string()
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_batch_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    #[serde(default)]
    pub kind: BackendKind,
    /// Base URLs, e.g. `http://127.0.0.1:8080/v1`.
    #[serde(default)]
    pub endpoints: Vec<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    /// Name of the environment variable holding the bearer credential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Texts per embeddings request; requests per scheduling wave.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Mock fixture file (mock kind only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<std::path::PathBuf>,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoints: Vec::new(),
            model_name: default_model(),
            api_key_env: None,
            max_concurrency: default_concurrency(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout_ms(),
            batch_size: default_batch_size(),
            fixture: None,
        }
    }
}

impl BackendSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrency < 1 {
            return Err("max_concurrency must be >= 1".into());
        }
        if self.retry.max_attempts < 1 {
            return Err("retry.max_attempts must be >= 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be >= 1".into());
        }
        if self.kind == BackendKind::Remote && self.endpoints.is_empty() {
            return Err("remote backend needs at least one endpoint".into());
        }
        Ok(())
    }
}

/// Builds the raw transport described by `spec`. Relative fixture paths
/// resolve against `base`.
pub fn build_backend(spec: &BackendSpec, base: &Path) -> Result<Arc<dyn Backend>, BackendError> {
    spec.validate().map_err(BackendError::Setup)?;
    match spec.kind {
        BackendKind::Mock => {
            let fixture = match &spec.fixture {
                Some(p) => {
                    let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                    Fixture::load(&path).map_err(|e| BackendError::Setup(e.to_string()))?
                }
                None => Fixture::default(),
            };
            Ok(Arc::new(MockBackend::new(&spec.model_name, fixture)))
        }
        BackendKind::Remote => {
            let api_key = match &spec.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    BackendError::Setup(format!("environment variable `{var}` is not set"))
                })?),
                None => None,
            };
            Ok(Arc::new(RemoteBackend::new(
                spec.endpoints.clone(),
                &spec.model_name,
                api_key,
                Duration::from_millis(spec.timeout_ms),
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
    pub want_logprobs: bool,
    pub echo: bool,
}

impl CompletionRequest {
    pub fn generate(prompt: impl Into<String>, max_tokens: usize, stop: Vec<String>, temperature: f64) -> Self {
        Self { prompt: prompt.into(), max_tokens, temperature, stop, want_logprobs: false, echo: false }
    }

    /// Echoed, logprob-bearing request with no generated tokens.
    pub fn score(text: impl Into<String>) -> Self {
        Self { prompt: text.into(), max_tokens: 0, temperature: 0.0, stop: Vec::new(), want_logprobs: true, echo: true }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Precondition("temperature must be >= 0".into()));
        }
        if self.echo && !self.want_logprobs {
            return Err(BackendError::Precondition("echo requires logprobs".into()));
        }
        if self.prompt.is_empty() && !self.echo {
            return Err(BackendError::Precondition("empty prompt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Generated continuation only; never includes the echoed prompt.
    pub text: String,
    /// Echoed prompt tokens (when requested) followed by generated tokens.
    pub tokens: Vec<String>,
    /// Aligned with `tokens`; `None` marks an unscored token.
    pub token_logprobs: Vec<Option<f64>>,
    /// Character offset of each token, when the server reports them.
    #[serde(default)]
    pub text_offsets: Vec<usize>,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub continuation_logprob_sum: f64,
    pub continuation_token_count: usize,
}

/// Raw model transport. `shard` selects the endpoint for multi-endpoint backends.
pub trait Backend: Send + Sync {
    /// Stable identity used to namespace cached responses.
    fn identity(&self) -> String;

    fn model_name(&self) -> &str;

    fn shard_count(&self) -> usize {
        1
    }

    fn complete(&self, shard: usize, request: &CompletionRequest) -> Result<Completion, BackendError>;

    fn embed(&self, shard: usize, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> (&'a str, bool) {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(at) => (&text[..at], true),
        None => (text, false),
    }
}
