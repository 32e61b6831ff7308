//! Local HTTP server exposing the mock model over the wire protocol.
//!
//! Routes: `POST /v1/completions`, `POST /v1/embeddings` (also without the
//! `/v1` prefix) and `GET /stats`, which reports request counts and the
//! peak number of requests handled concurrently.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use super::mock::FailureScript;
use super::{BackendError, CompletionRequest, Fixture, MockModel};

const WORKERS: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("cannot start server: {0}")]
    Bind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ServerStats {
    pub request_count: u64,
    pub completion_requests: u64,
    pub embedding_requests: u64,
    pub in_flight: usize,
    pub peak_in_flight: usize,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    completions: AtomicU64,
    embeddings: AtomicU64,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl Counters {
    fn snapshot(&self) -> ServerStats {
        ServerStats {
            request_count: self.requests.load(Ordering::SeqCst),
            completion_requests: self.completions.load(Ordering::SeqCst),
            embedding_requests: self.embeddings.load(Ordering::SeqCst),
            in_flight: self.in_flight.load(Ordering::SeqCst),
            peak_in_flight: self.peak.load(Ordering::SeqCst),
        }
    }
}

struct State {
    model: MockModel,
    failures: FailureScript,
    latency: Duration,
    counters: Counters,
}

pub struct MockServer {
    server: Arc<Server>,
    state: Arc<State>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts serving.
    pub fn start(fixture: Fixture, port: u16) -> Result<MockServer, ServerError> {
        let server = Server::http(("127.0.0.1", port)).map_err(|e| {
            match e.downcast_ref::<std::io::Error>() {
                Some(io) if io.kind() == std::io::ErrorKind::AddrInUse => ServerError::PortInUse(port),
                _ => ServerError::Bind(e.to_string()),
            }
        })?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| ServerError::Bind("not an IP listener".into()))?;
        let state = Arc::new(State {
            failures: FailureScript::new(fixture.failures.clone()),
            latency: Duration::from_millis(fixture.latency_ms),
            model: MockModel::new(fixture),
            counters: Counters::default(),
        });
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..WORKERS)
            .map(|_| {
                let (server, state, stop) = (server.clone(), state.clone(), stop.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv() {
                            Ok(req) => handle(&state, req),
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(MockServer { server, state, addr, stop, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to put in a remote backend's endpoint list.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> ServerStats {
        self.state.counters.snapshot()
    }

    /// Blocks the calling thread until the workers exit.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if !self.workers.is_empty() {
            self.stop_workers();
        }
    }
}

fn json_response(status: u16, body: Value) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn handle(state: &State, mut req: tiny_http::Request) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    let route = path.strip_prefix("/v1").unwrap_or(&path).to_string();
    let response = match (req.method(), route.as_str()) {
        (Method::Get, "/stats") => json_response(200, serde_json::to_value(state.counters.snapshot()).expect("stats")),
        (Method::Post, "/completions") | (Method::Post, "/embeddings") => {
            let c = &state.counters;
            c.requests.fetch_add(1, Ordering::SeqCst);
            let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            c.peak.fetch_max(now, Ordering::SeqCst);
            let mut body = String::new();
            let resp = match req.as_reader().read_to_string(&mut body) {
                Ok(_) if route == "/completions" => {
                    c.completions.fetch_add(1, Ordering::SeqCst);
                    serve_completion(state, &body)
                }
                Ok(_) => {
                    c.embeddings.fetch_add(1, Ordering::SeqCst);
                    serve_embeddings(state, &body)
                }
                Err(e) => json_response(400, json!({"error": e.to_string()})),
            };
            c.in_flight.fetch_sub(1, Ordering::SeqCst);
            resp
        }
        _ => json_response(404, json!({"error": format!("no route {path}")})),
    };
    let _ = req.respond(response);
}

#[derive(Deserialize)]
struct WireRequest {
    prompt: String,
    #[serde(default)]
    max_tokens: Option<usize>,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    stop: Option<Value>,
    #[serde(default)]
    logprobs: Option<Value>,
    #[serde(default)]
    echo: Option<bool>,
}

fn error_body(e: &BackendError) -> (u16, Value) {
    let status = match e {
        BackendError::Precondition(_) | BackendError::Protocol(_) => 400,
        _ => 500,
    };
    (status, json!({"error": {"message": e.to_string()}}))
}

fn serve_completion(state: &State, body: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    let wire: WireRequest = match serde_json::from_str(body) {
        Ok(w) => w,
        Err(e) => return json_response(400, json!({"error": {"message": e.to_string()}})),
    };
    if !state.latency.is_zero() {
        std::thread::sleep(state.latency);
    }
    if let Some(status) = state.failures.check(&wire.prompt) {
        return json_response(status, json!({"error": {"message": "scripted failure"}}));
    }
    let stop = match wire.stop {
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a.into_iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
        _ => Vec::new(),
    };
    let echo = wire.echo.unwrap_or(false);
    let want_logprobs = wire.logprobs.as_ref().is_some_and(|v| !v.is_null());
    let request = CompletionRequest {
        prompt: wire.prompt,
        max_tokens: wire.max_tokens.unwrap_or(16),
        temperature: wire.temperature.unwrap_or(1.0),
        stop,
        want_logprobs,
        echo,
    };
    match state.model.complete(&request) {
        Ok(c) => {
            let text = if echo { format!("{}{}", request.prompt, c.text) } else { c.text.clone() };
            let logprobs = want_logprobs.then(|| {
                json!({"tokens": c.tokens, "token_logprobs": c.token_logprobs, "text_offset": c.text_offsets})
            });
            json_response(
                200,
                json!({
                    "object": "text_completion",
                    "model": "mock",
                    "choices": [{"index": 0, "text": text, "finish_reason": c.finish_reason, "logprobs": logprobs}],
                }),
            )
        }
        Err(e) => {
            let (status, body) = error_body(&e);
            json_response(status, body)
        }
    }
}

fn serve_embeddings(state: &State, body: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return json_response(400, json!({"error": {"message": e.to_string()}})),
    };
    if !state.latency.is_zero() {
        std::thread::sleep(state.latency);
    }
    let texts: Vec<String> = match value.get("input") {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
        _ => return json_response(400, json!({"error": {"message": "missing input"}})),
    };
    match state.model.embed(&texts) {
        Ok(rows) => {
            let data: Vec<Value> = rows
                .into_iter()
                .enumerate()
                .map(|(i, e)| json!({"object": "embedding", "index": i, "embedding": e}))
                .collect();
            json_response(200, json!({"object": "list", "data": data}))
        }
        Err(e) => {
            let (status, body) = error_body(&e);
            json_response(status, body)
        }
    }
}
