//! HTTP client for servers speaking the completions/embeddings wire protocol.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{truncate_at_stop, Backend, BackendError, Completion, CompletionRequest, FinishReason};

pub struct RemoteBackend {
    endpoints: Vec<String>,
    model_name: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(endpoints: Vec<String>, model_name: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let endpoints = endpoints.into_iter().map(|e| e.trim_end_matches('/').to_string()).collect();
        Self { endpoints, model_name: model_name.to_string(), api_key, agent }
    }

    fn post(&self, shard: usize, path: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let url = format!("{}/{}", self.endpoints[shard % self.endpoints.len()], path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string()).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(status, &text));
        }
        Ok(text)
    }
}

fn map_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::StatusCode(s) => BackendError::from_status(s, ""),
        other => BackendError::Transport(other.to_string()),
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(200).collect()
}

#[derive(Deserialize)]
struct WireCompletion {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct WireEmbeddings {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

/// Request body in wire form.
pub(crate) fn completion_body(model: &str, request: &CompletionRequest) -> serde_json::Value {
    json!({
        "model": model,
        "prompt": request.prompt,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
        "stop": request.stop,
        "logprobs": if request.want_logprobs { Some(0) } else { None },
        "echo": request.echo,
    })
}

/// Decodes a completions response for `request`.
pub(crate) fn parse_completion(body: &str, request: &CompletionRequest) -> Result<Completion, BackendError> {
    let wire: WireCompletion = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("{e}: {}", excerpt(body))))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol(format!("no choices: {}", excerpt(body))))?;
    let generated = if request.echo {
        choice
            .text
            .strip_prefix(request.prompt.as_str())
            .ok_or_else(|| BackendError::Protocol("echoed text does not start with the prompt".into()))?
            .to_string()
    } else {
        choice.text
    };
    let (cut, stopped) = truncate_at_stop(&generated, &request.stop);
    let finish_reason = match choice.finish_reason.as_deref() {
        _ if stopped => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    let (tokens, token_logprobs, text_offsets) = match choice.logprobs {
        Some(lp) => (lp.tokens, lp.token_logprobs, lp.text_offset),
        None if request.want_logprobs => {
            return Err(BackendError::Protocol("logprobs requested but absent".into()));
        }
        None => (Vec::new(), Vec::new(), Vec::new()),
    };
    if tokens.len() != token_logprobs.len() {
        return Err(BackendError::Protocol("tokens and token_logprobs differ in length".into()));
    }
    Ok(Completion { text: cut.to_string(), tokens, token_logprobs, text_offsets, finish_reason })
}

pub(crate) fn parse_embeddings(body: &str, expected: usize) -> Result<Vec<Vec<f64>>, BackendError> {
    let wire: WireEmbeddings = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("{e}: {}", excerpt(body))))?;
    let mut rows: Vec<(usize, Vec<f64>)> =
        wire.data.into_iter().enumerate().map(|(i, d)| (d.index.unwrap_or(i), d.embedding)).collect();
    rows.sort_by_key(|(i, _)| *i);
    if rows.len() != expected || rows.iter().enumerate().any(|(i, (j, _))| i != *j) {
        return Err(BackendError::Protocol(format!("expected {expected} embeddings")));
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

impl Backend for RemoteBackend {
    fn identity(&self) -> String {
        let mut eps = self.endpoints.clone();
        eps.sort();
        format!("remote:{}", eps.join(","))
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn shard_count(&self) -> usize {
        self.endpoints.len()
    }

    fn complete(&self, shard: usize, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let body = self.post(shard, "completions", &completion_body(&self.model_name, request))?;
        parse_completion(&body, request)
    }

    fn embed(&self, shard: usize, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({ "model": self.model_name, "input": texts });
        let text = self.post(shard, "embeddings", &body)?;
        parse_embeddings(&text, texts.len())
    }
}
