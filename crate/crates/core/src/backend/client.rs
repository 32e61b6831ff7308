use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use super::{cache_key, Backend, BackendError, BackendSpec, Completion, CompletionRequest, ResponseCache, RetryPolicy, TokenScores};

/// Result slot of one request in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub result: Result<Completion, BackendError>,
    /// Requests actually sent to the backend for this slot (0 on a cache hit).
    pub attempts: u32,
    pub cached: bool,
}

#[derive(Debug, Default)]
struct Stats {
    backend_requests: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct StatsSnapshot {
    pub backend_requests: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub peak_in_flight: usize,
}

impl StatsSnapshot {
    pub fn cache_hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

/// Scheduling front-end over a [`Backend`].
///
/// Every request goes through the cache (when attached) and the retry loop.
/// Batches run on at most `max_concurrency` worker threads; request `i` is
/// routed to shard `i % shard_count`.
pub struct Client {
    backend: Arc<dyn Backend>,
    max_concurrency: usize,
    retry: RetryPolicy,
    batch_size: usize,
    cache: Option<ResponseCache>,
    stats: Stats,
    round_robin: AtomicUsize,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("backend", &self.backend.identity())
            .field("max_concurrency", &self.max_concurrency)
            .field("cache", &self.cache)
            .finish()
    }
}

impl Client {
    pub fn new(backend: Arc<dyn Backend>, spec: &BackendSpec) -> Self {
        Self {
            backend,
            max_concurrency: spec.max_concurrency.max(1),
            retry: spec.retry.clone(),
            batch_size: spec.batch_size.max(1),
            cache: None,
            stats: Stats::default(),
            round_robin: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn model_name(&self) -> &str {
        self.backend.model_name()
    }

    pub fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            backend_requests: self.stats.backend_requests.load(Ordering::SeqCst),
            cache_hits: self.stats.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.stats.cache_misses.load(Ordering::SeqCst),
            peak_in_flight: self.stats.peak_in_flight.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let shard = self.round_robin.fetch_add(1, Ordering::Relaxed);
        self.run_one(shard, request).result
    }

    /// Runs `requests` with bounded concurrency. `output[i]` always answers
    /// `requests[i]`; failures stay in their slot.
    pub fn execute_batch(&self, requests: &[CompletionRequest]) -> Vec<BatchOutcome> {
        let shards = self.backend.shard_count().max(1);
        schedule(requests.len(), self.max_concurrency, |i| self.run_one(i % shards, &requests[i]))
    }

    /// Sum of log-probabilities of the tokens of `continuation` following `prompt`.
    pub fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<TokenScores, BackendError> {
        self.score_batch(&[(prompt.to_string(), continuation.to_string())])
            .pop()
            .expect("one result per pair")
    }

    pub fn score_batch(&self, pairs: &[(String, String)]) -> Vec<Result<TokenScores, BackendError>> {
        let mut out: Vec<Option<Result<TokenScores, BackendError>>> = vec![None; pairs.len()];
        let mut requests = Vec::new();
        let mut positions = Vec::new();
        for (i, (prompt, continuation)) in pairs.iter().enumerate() {
            if continuation.is_empty() {
                out[i] = Some(Err(BackendError::Precondition("continuation is empty".into())));
            } else {
                requests.push(CompletionRequest::score(format!("{prompt}{continuation}")));
                positions.push(i);
            }
        }
        for (outcome, i) in self.execute_batch(&requests).into_iter().zip(positions) {
            let (prompt, continuation) = &pairs[i];
            out[i] = Some(outcome.result.and_then(|c| continuation_scores(&c, prompt, continuation)));
        }
        out.into_iter().map(|r| r.expect("every slot filled")).collect()
    }

    /// Embeds `texts` in requests of at most `batch_size` texts.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(BackendError::Precondition(format!("empty text at position {i}")));
        }
        let chunks: Vec<(usize, &[String])> = texts
            .chunks(self.batch_size)
            .enumerate()
            .map(|(k, c)| (k * self.batch_size, c))
            .collect();
        let shards = self.backend.shard_count().max(1);
        let results = schedule(chunks.len(), self.max_concurrency, |k| {
            let (start, chunk) = chunks[k];
            let (res, _) = self.with_retry(|| self.call(|| self.backend.embed(k % shards, chunk)));
            res.and_then(|rows| {
                if rows.len() == chunk.len() {
                    Ok(rows)
                } else {
                    Err(BackendError::Protocol(format!("{} vectors for {} texts", rows.len(), chunk.len())))
                }
            })
            .map_err(|cause| BackendError::InBatch { start, end: start + chunk.len(), cause: Box::new(cause) })
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    fn run_one(&self, shard: usize, request: &CompletionRequest) -> BatchOutcome {
        if let Err(e) = request.validate() {
            return BatchOutcome { result: Err(e), attempts: 0, cached: false };
        }
        let key = self
            .cache
            .as_ref()
            .map(|_| cache_key(&self.backend.identity(), self.backend.model_name(), request));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
                return BatchOutcome { result: Ok(hit), attempts: 0, cached: true };
            }
            self.stats.cache_misses.fetch_add(1, Ordering::SeqCst);
        }
        let (result, attempts) = self.with_retry(|| self.call(|| self.backend.complete(shard, request)));
        if let (Ok(c), Some(cache), Some(key)) = (&result, &self.cache, &key) {
            if let Err(e) = cache.put(key, c) {
                log::warn!("cache write failed: {e}");
            }
        }
        BatchOutcome { result, attempts, cached: false }
    }

    /// One instrumented backend call.
    fn call<T>(&self, f: impl FnOnce() -> Result<T, BackendError>) -> Result<T, BackendError> {
        self.stats.backend_requests.fetch_add(1, Ordering::SeqCst);
        let now = self.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.stats.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let r = f();
        self.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
        r
    }

    fn with_retry<T>(&self, mut attempt_once: impl FnMut() -> Result<T, BackendError>) -> (Result<T, BackendError>, u32) {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match attempt_once() {
                Ok(v) => return (Ok(v), attempt),
                Err(e) if e.is_retryable() => {
                    if attempt >= max {
                        let err = BackendError::ExhaustedRetries { attempts: attempt, cause: Box::new(e) };
                        return (Err(err), attempt);
                    }
                    log::debug!("attempt {attempt} failed ({e}); retrying");
                    thread::sleep(self.retry.delay(attempt));
                }
                Err(e) => return (Err(e), attempt),
            }
        }
    }
}

/// Runs `f(0..n)` on at most `workers` threads and returns results in index order.
fn schedule<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|s| s.expect("every index scheduled"))
        .collect()
}

/// Sums log-probabilities of the echoed tokens that belong to `continuation`.
///
/// Token spans come from reported character offsets, or cumulative token
/// lengths when offsets are absent. A token straddling the prompt boundary
/// counts as continuation. Unscored tokens are skipped.
pub fn continuation_scores(completion: &Completion, prompt: &str, continuation: &str) -> Result<TokenScores, BackendError> {
    let boundary = prompt.chars().count();
    let total = boundary + continuation.chars().count();
    let n = completion.tokens.len();
    if completion.token_logprobs.len() != n {
        return Err(BackendError::Protocol(format!(
            "{} tokens but {} logprobs",
            n,
            completion.token_logprobs.len()
        )));
    }
    let offsets: Vec<usize> = if completion.text_offsets.len() == n {
        completion.text_offsets.clone()
    } else {
        let concat: String = completion.tokens.concat();
        let full = format!("{prompt}{continuation}");
        if !full.starts_with(&concat) && !concat.starts_with(&full) {
            return Err(BackendError::BoundaryMismatch("echoed tokens do not spell the request".into()));
        }
        completion
            .tokens
            .iter()
            .scan(0usize, |pos, t| {
                let at = *pos;
                *pos += t.chars().count();
                Some(at)
            })
            .collect()
    };
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(BackendError::BoundaryMismatch("token offsets are not monotone".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut members = 0usize;
    for ((tok, lp), &start) in completion.tokens.iter().zip(&completion.token_logprobs).zip(&offsets) {
        if start >= total {
            break;
        }
        let end = start + tok.chars().count();
        if end > boundary {
            members += 1;
            if let Some(lp) = lp {
                sum += lp;
                count += 1;
            }
        }
    }
    if members == 0 {
        return Err(BackendError::BoundaryMismatch("no echoed token falls in the continuation".into()));
    }
    if count == 0 {
        return Err(BackendError::BoundaryMismatch("continuation tokens are all unscored".into()));
    }
    Ok(TokenScores { continuation_logprob_sum: sum, continuation_token_count: count })
}
