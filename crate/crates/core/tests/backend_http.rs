use std::sync::Arc;
use std::time::Duration;

use icl_core::backend::{
    BackendError, BackendSpec, Client, CompletionRequest, Fixture, MockBackend, MockServer, RemoteBackend,
    ResponseCache, RetryPolicy, ScriptedCompletion, ScriptedFailure, ServerError, ServerStats,
};

fn remote_client(urls: Vec<String>, concurrency: usize) -> Client {
    let spec = BackendSpec {
        max_concurrency: concurrency,
        retry: RetryPolicy { max_attempts: 3, base_delay_ms: 5, multiplier: 2.0 },
        ..BackendSpec::default()
    };
    let backend = RemoteBackend::new(urls, "mock", None, Duration::from_secs(10));
    Client::new(Arc::new(backend), &spec)
}

fn scripted(n: usize) -> Fixture {
    let mut fx = Fixture { latency_ms: 15, ..Fixture::default() };
    for i in 0..n {
        fx.completions.insert(format!("prompt {i}"), ScriptedCompletion { text: format!(" answer {i}"), logprobs: None });
    }
    fx
}

fn http_stats(server: &MockServer) -> ServerStats {
    ureq::get(format!("{}/stats", server.base_url())).call().unwrap().body_mut().read_json().unwrap()
}

#[test]
fn fifty_requests_bounded_and_ordered() {
    let server = MockServer::start(scripted(50), 0).unwrap();
    let client = remote_client(vec![server.base_url()], 4);
    let requests: Vec<_> = (0..50).map(|i| CompletionRequest::generate(format!("prompt {i}"), 8, vec![], 0.0)).collect();
    let out = client.execute_batch(&requests);
    assert_eq!(out.len(), 50);
    for (i, o) in out.iter().enumerate() {
        assert_eq!(o.result.as_ref().unwrap().text, format!(" answer {i}"));
        assert_eq!(o.attempts, 1);
    }
    assert!(client.stats().peak_in_flight <= 4);
    let stats = http_stats(&server);
    assert!(stats.peak_in_flight <= 4, "{stats:?}");
    assert!(stats.peak_in_flight >= 2, "no overlap observed: {stats:?}");
    assert_eq!(stats.completion_requests, 50);
}

#[test]
fn rate_limited_then_ok_takes_two_attempts() {
    let mut fx = scripted(1);
    fx.failures.push(ScriptedFailure { prompt: Some("prompt 0".into()), statuses: vec![429], always: None });
    let server = MockServer::start(fx, 0).unwrap();
    let client = remote_client(vec![server.base_url()], 2);
    let out = client.execute_batch(&[CompletionRequest::generate("prompt 0", 8, vec![], 0.0)]);
    assert_eq!(out[0].attempts, 2);
    assert_eq!(out[0].result.as_ref().unwrap().text, " answer 0");
    assert_eq!(server.stats().completion_requests, 2);
}

#[test]
fn persistent_server_error_exhausts_retries() {
    let mut fx = scripted(2);
    fx.failures.push(ScriptedFailure { prompt: Some("prompt 1".into()), statuses: vec![], always: Some(500) });
    let server = MockServer::start(fx, 0).unwrap();
    let client = remote_client(vec![server.base_url()], 2);
    let reqs: Vec<_> = (0..2).map(|i| CompletionRequest::generate(format!("prompt {i}"), 8, vec![], 0.0)).collect();
    let out = client.execute_batch(&reqs);
    assert!(out[0].result.is_ok());
    assert_eq!(out[1].attempts, 3);
    assert!(out[1].result.is_err());
}

#[test]
fn bad_request_is_not_retried() {
    let server = MockServer::start(Fixture::default(), 0).unwrap();
    let client = remote_client(vec![server.base_url()], 1);
    let backend = client.backend().clone();
    let mut req = CompletionRequest::score("x y");
    req.want_logprobs = false;
    let err = backend.complete(0, &req).unwrap_err();
    assert!(!err.is_retryable(), "{err:?}");
}

#[test]
fn remote_matches_in_process_mock() {
    let fx = Fixture::default();
    let server = MockServer::start(fx.clone(), 0).unwrap();
    let remote = remote_client(vec![server.base_url()], 2);
    let local = Client::new(Arc::new(MockBackend::new("mock", fx)), &BackendSpec::default());
    let reqs = vec![
        CompletionRequest::generate("A B", 2, vec![], 0.0),
        CompletionRequest::score("the cat sat"),
    ];
    let a: Vec<_> = remote.execute_batch(&reqs).into_iter().map(|o| o.result.unwrap()).collect();
    let b: Vec<_> = local.execute_batch(&reqs).into_iter().map(|o| o.result.unwrap()).collect();
    // Token detail only travels over the wire when logprobs are requested.
    assert_eq!((&a[0].text, a[0].finish_reason), (&b[0].text, b[0].finish_reason));
    assert_eq!(a[1], b[1]);
    let s = remote.score_continuation("x", " y z").unwrap();
    assert_eq!(s.continuation_token_count, 2);
    let texts = vec!["a b".to_string(), "b a".to_string()];
    assert_eq!(remote.embed(&texts).unwrap(), local.embed(&texts).unwrap());
}

#[test]
fn cache_makes_second_batch_free() {
    let server = MockServer::start(scripted(10), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let reqs: Vec<_> = (0..10).map(|i| CompletionRequest::generate(format!("prompt {i}"), 8, vec![], 0.0)).collect();
    let first = remote_client(vec![server.base_url()], 4).with_cache(Some(ResponseCache::open(dir.path()).unwrap()));
    let a: Vec<_> = first.execute_batch(&reqs).into_iter().map(|o| o.result.unwrap()).collect();
    let before = server.stats().request_count;
    let second = remote_client(vec![server.base_url()], 4).with_cache(Some(ResponseCache::open(dir.path()).unwrap()));
    let out = second.execute_batch(&reqs);
    assert!(out.iter().all(|o| o.cached));
    let b: Vec<_> = out.into_iter().map(|o| o.result.unwrap()).collect();
    assert_eq!(a, b);
    assert_eq!(server.stats().request_count, before);
    assert_eq!(second.stats().backend_requests, 0);
}

#[test]
fn endpoints_share_the_load() {
    let s1 = MockServer::start(scripted(8), 0).unwrap();
    let s2 = MockServer::start(scripted(8), 0).unwrap();
    let client = remote_client(vec![s1.base_url(), s2.base_url()], 4);
    let reqs: Vec<_> = (0..8).map(|i| CompletionRequest::generate(format!("prompt {i}"), 8, vec![], 0.0)).collect();
    let out = client.execute_batch(&reqs);
    assert!(out.iter().all(|o| o.result.is_ok()));
    assert_eq!(s1.stats().completion_requests + s2.stats().completion_requests, 8);
    assert!(s1.stats().completion_requests > 0 && s2.stats().completion_requests > 0);
}

#[test]
fn unreachable_endpoint_is_an_error() {
    let server = MockServer::start(Fixture::default(), 0).unwrap();
    let url = server.base_url();
    server.shutdown();
    let client = remote_client(vec![url], 1);
    let out = client.execute_batch(&[CompletionRequest::generate("x", 1, vec![], 0.0)]);
    let err = out[0].result.as_ref().unwrap_err();
    assert!(!matches!(err, BackendError::Precondition(_)), "{err:?}");
}

#[test]
fn busy_port_is_reported() {
    let server = MockServer::start(Fixture::default(), 0).unwrap();
    let port = server.addr().port();
    match MockServer::start(Fixture::default(), port) {
        Err(ServerError::PortInUse(p)) => assert_eq!(p, port),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second server bound the same port"),
    }
}
