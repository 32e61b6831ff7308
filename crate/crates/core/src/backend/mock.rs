//! Deterministic mock language model.
//!
//! Tokens are whitespace-delimited words; each token carries the whitespace
//! that precedes it, so token texts concatenate back to the input (minus
//! trailing whitespace). The log-probability of word `t` after context words
//! `c` is FNV-1a-64 folded over `c.join(" ") ++ "\x1f" ++ t`, mapped linearly
//! onto `[-8.0, -0.05]`. A fixture can script exact prompts, replace scores,
//! add cue rules, or inject HTTP failures.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{truncate_at_stop, Backend, BackendError, Completion, CompletionRequest, FinishReason};

pub const LOGPROB_MIN: f64 = -8.0;
pub const LOGPROB_MAX: f64 = -0.05;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fold(FNV_OFFSET, bytes)
}

fn fold(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn map_hash(h: u64) -> f64 {
    LOGPROB_MIN + (LOGPROB_MAX - LOGPROB_MIN) * (h as f64 / u64::MAX as f64)
}

/// Hash-mode log-probability of `word` after `context` words.
pub fn mock_logprob(context: &[&str], word: &str) -> f64 {
    let joined = context.join(" ");
    let h = fold(fold(fnv1a64(joined.as_bytes()), &[0x1f]), word.as_bytes());
    map_hash(h)
}

/// Hashed bag-of-words vector, L2-normalized (all zeros for a text without words).
pub fn mock_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for word in text.split_whitespace() {
        v[(fnv1a64(word.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockToken<'a> {
    /// Token text including its leading whitespace.
    pub text: &'a str,
    pub word: &'a str,
    /// Character offset of `text` within the input.
    pub offset: usize,
}

pub fn tokenize(text: &str) -> Vec<MockToken<'_>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    let mut char_pos = 0usize;
    let mut ws_start: Option<(usize, usize)> = None;
    while let Some(&(byte, ch)) = chars.peek() {
        if ch.is_whitespace() {
            if ws_start.is_none() {
                ws_start = Some((byte, char_pos));
            }
            chars.next();
            char_pos += 1;
            continue;
        }
        let (tok_byte, tok_char) = ws_start.take().unwrap_or((byte, char_pos));
        let word_start = byte;
        let mut end = byte;
        while let Some(&(b, c)) = chars.peek() {
            if c.is_whitespace() {
                break;
            }
            end = b + c.len_utf8();
            chars.next();
            char_pos += 1;
        }
        out.push(MockToken { text: &text[tok_byte..end], word: &text[word_start..end], offset: tok_char });
    }
    out
}

/// Gives `token` a fixed log-probability whenever `cue` occurs among the
/// last `window` context words. Tokens named by some rule whose cue is absent
/// get the floor log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueRule {
    pub cue: String,
    pub token: String,
    pub logprob: f64,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedCompletion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

/// Makes matching completion requests fail with HTTP statuses: `statuses` in
/// order for the first matching requests, or `always` for every one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFailure {
    /// Exact prompt to match; `None` matches every request.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub statuses: Vec<u16>,
    #[serde(default)]
    pub always: Option<u16>,
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    /// Exact prompt to scripted generation.
    #[serde(default)]
    pub completions: BTreeMap<String, ScriptedCompletion>,
    /// Exact echoed text to per-token log-probabilities (`null` = unscored).
    #[serde(default)]
    pub scores: BTreeMap<String, Vec<Option<f64>>>,
    /// Replaces hashed log-probabilities with a constant.
    #[serde(default)]
    pub token_logprob: Option<f64>,
    #[serde(default)]
    pub rules: Vec<CueRule>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub failures: Vec<ScriptedFailure>,
    /// Artificial service time per request.
    #[serde(default)]
    pub latency_ms: u64,
}

impl Default for Fixture {
    fn default() -> Self {
        Self {
            completions: BTreeMap::new(),
            scores: BTreeMap::new(),
            token_logprob: None,
            rules: Vec::new(),
            embedding_dim: default_dim(),
            failures: Vec::new(),
            latency_ms: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixture {0}: {1}")]
    Io(String, std::io::Error),
    #[error("malformed fixture: {0}")]
    Malformed(String),
}

impl Fixture {
    pub fn load(path: &Path) -> Result<Fixture, FixtureError> {
        let text = std::fs::read_to_string(path).map_err(|e| FixtureError::Io(path.display().to_string(), e))?;
        Fixture::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Fixture, FixtureError> {
        if text.trim().is_empty() {
            return Ok(Fixture::default());
        }
        let f: Fixture = serde_json::from_str(text).map_err(|e| FixtureError::Malformed(e.to_string()))?;
        if f.embedding_dim == 0 {
            return Err(FixtureError::Malformed("embedding_dim must be >= 1".into()));
        }
        Ok(f)
    }
}

/// The pure model: outputs depend only on (request, fixture).
#[derive(Debug, Clone)]
pub struct MockModel {
    fixture: Fixture,
}

impl MockModel {
    pub fn new(fixture: Fixture) -> Self {
        Self { fixture }
    }

    pub fn fixture(&self) -> &Fixture {
        &self.fixture
    }

    fn token_logprob(&self, context: &[&str], word: &str) -> f64 {
        let mut named = false;
        for rule in self.fixture.rules.iter().filter(|r| r.token == word) {
            named = true;
            let start = context.len().saturating_sub(rule.window);
            if context[start..].iter().any(|w| *w == rule.cue) {
                return rule.logprob;
            }
        }
        if named {
            return LOGPROB_MIN;
        }
        self.fixture.token_logprob.unwrap_or_else(|| mock_logprob(context, word))
    }

    fn next_word(&self, context: &[&str]) -> String {
        for rule in &self.fixture.rules {
            let start = context.len().saturating_sub(rule.window);
            if context[start..].iter().any(|w| *w == rule.cue) {
                return rule.token.clone();
            }
        }
        let joined = context.join(" ");
        let h = fold(fnv1a64(joined.as_bytes()), &[0x1e]);
        format!("w{:03x}", h % 4096)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        request.validate()?;
        let prompt_tokens = tokenize(&request.prompt);
        let mut context: Vec<&str> = Vec::with_capacity(prompt_tokens.len());
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut offsets = Vec::new();

        if request.echo {
            let scripted = self.fixture.scores.get(&request.prompt);
            if let Some(s) = scripted {
                if s.len() != prompt_tokens.len() {
                    return Err(BackendError::Protocol(format!(
                        "fixture scores {} tokens, prompt has {}",
                        s.len(),
                        prompt_tokens.len()
                    )));
                }
            }
            for (i, tok) in prompt_tokens.iter().enumerate() {
                let lp = match scripted {
                    Some(s) => s[i],
                    None => Some(self.token_logprob(&context, tok.word)),
                };
                tokens.push(tok.text.to_string());
                logprobs.push(lp);
                offsets.push(tok.offset);
                context.push(tok.word);
            }
        } else {
            context.extend(prompt_tokens.iter().map(|t| t.word));
        }

        let base_offset = request.prompt.chars().count();
        let mut text = String::new();
        let mut finish = FinishReason::Stop;
        if request.max_tokens > 0 {
            let mut gen_tokens: Vec<(String, f64)> = Vec::new();
            if let Some(sc) = self.fixture.completions.get(&request.prompt) {
                let scripted = tokenize(&sc.text);
                let mut ctx = context.clone();
                for (j, tok) in scripted.iter().enumerate() {
                    if j == request.max_tokens {
                        finish = FinishReason::Length;
                        break;
                    }
                    let lp = match &sc.logprobs {
                        Some(l) => l.get(j).copied().unwrap_or(LOGPROB_MIN),
                        None => self.token_logprob(&ctx, tok.word),
                    };
                    gen_tokens.push((tok.text.to_string(), lp));
                    ctx.push(tok.word);
                }
            } else {
                let mut owned: Vec<String> = Vec::new();
                for _ in 0..request.max_tokens {
                    let ctx: Vec<&str> = context.iter().copied().chain(owned.iter().map(String::as_str)).collect();
                    let word = self.next_word(&ctx);
                    let lp = self.token_logprob(&ctx, &word);
                    let text = if ctx.is_empty() { word.clone() } else { format!(" {word}") };
                    gen_tokens.push((text, lp));
                    owned.push(word);
                }
                finish = FinishReason::Length;
            }
            let full: String = gen_tokens.iter().map(|(t, _)| t.as_str()).collect();
            let (cut, stopped) = truncate_at_stop(&full, &request.stop);
            let cut_chars = cut.chars().count();
            if stopped {
                finish = FinishReason::Stop;
            }
            let mut pos = 0usize;
            for (tok, lp) in gen_tokens {
                let len = tok.chars().count();
                if pos + len > cut_chars {
                    break;
                }
                tokens.push(tok);
                logprobs.push(Some(lp));
                offsets.push(base_offset + pos);
                pos += len;
            }
            text = cut.to_string();
        }

        Ok(Completion { text, tokens, token_logprobs: logprobs, text_offsets: offsets, finish_reason: finish })
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(BackendError::Precondition(format!("empty text at position {i}")));
        }
        Ok(texts.iter().map(|t| mock_embedding(t, self.fixture.embedding_dim)).collect())
    }
}

/// Scripted failure state, shared across threads.
#[derive(Debug, Default)]
pub(crate) struct FailureScript {
    rules: Vec<ScriptedFailure>,
    served: Mutex<Vec<usize>>,
}

impl FailureScript {
    pub(crate) fn new(rules: Vec<ScriptedFailure>) -> Self {
        let served = Mutex::new(vec![0; rules.len()]);
        Self { rules, served }
    }

    /// Status to fail this request with, if any.
    pub(crate) fn check(&self, prompt: &str) -> Option<u16> {
        let mut served = self.served.lock().expect("failure script poisoned");
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.prompt.as_deref().is_some_and(|p| p != prompt) {
                continue;
            }
            if let Some(s) = rule.always {
                return Some(s);
            }
            if served[i] < rule.statuses.len() {
                served[i] += 1;
                return Some(rule.statuses[served[i] - 1]);
            }
        }
        None
    }
}

/// In-process mock backend.
#[derive(Debug)]
pub struct MockBackend {
    model_name: String,
    model: MockModel,
    failures: FailureScript,
    identity: String,
}

impl MockBackend {
    pub fn new(model_name: &str, fixture: Fixture) -> Self {
        let canonical = serde_json::to_vec(&fixture).expect("fixture serializes");
        let identity = format!("mock:{:016x}", fnv1a64(&canonical));
        Self {
            model_name: model_name.to_string(),
            failures: FailureScript::new(fixture.failures.clone()),
            model: MockModel::new(fixture),
            identity,
        }
    }

    pub fn model(&self) -> &MockModel {
        &self.model
    }

    fn pause(&self) {
        let ms = self.model.fixture.latency_ms;
        if ms > 0 {
            std::thread::sleep(Duration::from_millis(ms));
        }
    }
}

impl Backend for MockBackend {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn complete(&self, _shard: usize, request: &CompletionRequest) -> Result<Completion, BackendError> {
        self.pause();
        if let Some(status) = self.failures.check(&request.prompt) {
            return Err(BackendError::from_status(status, "scripted failure"));
        }
        self.model.complete(request)
    }

    fn embed(&self, _shard: usize, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.pause();
        self.model.embed(texts)
    }
}
