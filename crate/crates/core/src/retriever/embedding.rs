//! Dense retrieval over L2-normalized embeddings.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ContextSet, DemoOrder, RetrieverError};
use crate::backend::Client;
use crate::par;

/// Row-major matrix of unit-length rows. All-zero rows stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Normalizes each row. Rows must share one dimension.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<EmbeddingMatrix, RetrieverError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(RetrieverError::DimensionMismatch { expected: dim, got: row.len() });
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                data.extend(row.iter().map(|x| x / norm));
            } else {
                data.extend(row);
            }
        }
        Ok(EmbeddingMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top `k` index rows by cosine similarity to `query`, most similar first.
/// Ties go to the smaller id.
pub fn topk_ranked(index: &EmbeddingMatrix, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = index.rows().enumerate().map(|(i, r)| (i, dot(r, query))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Instance-level TopK contexts with the nearest demonstration last.
pub fn topk_retrieve(
    index: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    ice_num: usize,
) -> Result<ContextSet, RetrieverError> {
    topk_retrieve_ordered(index, queries, ice_num, DemoOrder::NearestLast)
}

pub fn topk_retrieve_ordered(
    index: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    ice_num: usize,
    order: DemoOrder,
) -> Result<ContextSet, RetrieverError> {
    if index.is_empty() {
        return Err(RetrieverError::EmptyCorpus);
    }
    if !queries.is_empty() && queries.dim() != index.dim() {
        return Err(RetrieverError::DimensionMismatch { expected: index.dim(), got: queries.dim() });
    }
    let contexts = par::map_range(queries.len(), |t| {
        let ranked = topk_ranked(index, queries.row(t), ice_num);
        order.arrange(ranked.into_iter().map(|(id, _)| id).collect())
    });
    Ok(ContextSet::instance_level(ice_num, contexts))
}

/// Cache key for one embedded text under a given backend and model.
pub fn embedding_hash(backend_id: &str, model: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0x1f]);
    h.update(model.as_bytes());
    h.update([0x1f]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct StoredVector {
    hash: String,
    vector: Vec<f64>,
}

/// Persistent embedding cache, one JSON record per line.
#[derive(Debug, Default)]
pub struct EmbeddingStore {
    path: Option<PathBuf>,
    vectors: HashMap<String, Vec<f64>>,
    dirty: bool,
}

impl EmbeddingStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path`, loading any records already present. Unreadable lines are skipped.
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let mut vectors = HashMap::new();
        if path.exists() {
            let file = fs::File::open(&path)?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if let Ok(rec) = serde_json::from_str::<StoredVector>(&line) {
                    vectors.insert(rec.hash, rec.vector);
                }
            }
        }
        Ok(Self { path: Some(path), vectors, dirty: false })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, hash: &str) -> Option<&Vec<f64>> {
        self.vectors.get(hash)
    }

    pub fn insert(&mut self, hash: String, vector: Vec<f64>) {
        self.vectors.insert(hash, vector);
        self.dirty = true;
    }

    /// Rewrites the backing file atomically if anything changed.
    pub fn save(&mut self) -> std::io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if !self.dirty {
            return Ok(());
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            let rec = StoredVector { hash: k.clone(), vector: self.vectors[k].clone() };
            serde_json::to_writer(&mut tmp, &rec)?;
            tmp.write_all(b"\n")?;
        }
        tmp.persist(path).map_err(|e| e.error)?;
        self.dirty = false;
        Ok(())
    }
}

/// Embeds `texts` through the client, reusing and filling `store`.
/// Each distinct uncached text is sent once.
pub fn embed_corpus(
    client: &Client,
    texts: &[String],
    store: &mut EmbeddingStore,
) -> Result<EmbeddingMatrix, RetrieverError> {
    let backend_id = client.backend().identity();
    let model = client.model_name().to_string();
    let hashes: Vec<String> = texts.iter().map(|t| embedding_hash(&backend_id, &model, t)).collect();

    let mut pending: Vec<String> = Vec::new();
    let mut pending_hashes: Vec<String> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for (text, hash) in texts.iter().zip(&hashes) {
        if store.get(hash).is_none() && queued.insert(hash.clone()) {
            pending.push(text.clone());
            pending_hashes.push(hash.clone());
        }
    }
    if !pending.is_empty() {
        let vectors = client.embed(&pending)?;
        for (hash, v) in pending_hashes.into_iter().zip(vectors) {
            store.insert(hash, v);
        }
        store.save()?;
    }
    let rows = hashes.iter().map(|h| store.get(h).cloned().unwrap_or_default()).collect();
    EmbeddingMatrix::from_rows(rows)
}
