//! Content-addressed response cache.
//!
//! One file per response under the cache directory, named by the SHA-256 of
//! the request's canonical bytes. Writes go through a temp file and rename so
//! concurrent processes sharing a directory never see partial entries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Completion, CompletionRequest};

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    backend: &'a str,
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: String,
    stop: &'a [String],
    logprobs: bool,
    echo: bool,
}

/// Digest over the canonical form of a request. Temperature is fixed to six
/// decimals so equal settings hash equally everywhere.
pub fn cache_key(backend_id: &str, model_name: &str, request: &CompletionRequest) -> String {
    let canonical = CanonicalRequest {
        backend: backend_id,
        model: model_name,
        prompt: &request.prompt,
        max_tokens: request.max_tokens,
        temperature: format!("{:.6}", request.temperature),
        stop: &request.stop,
        logprobs: request.want_logprobs,
        echo: request.echo,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<Completion> {
        let bytes = fs::read(self.path(key)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put(&self, key: &str, completion: &Completion) -> std::io::Result<()> {
        let body = serde_json::to_vec(completion)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&body)?;
        tmp.persist(self.path(key)).map_err(|e| e.error)?;
        Ok(())
    }
}
