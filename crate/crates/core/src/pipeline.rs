//! End-to-end runs: load, retrieve, infer, evaluate, and write artifacts.
//!
//! Artifacts in the output directory:
//! - `contexts.jsonl`: a `{mode, ice_num}` header line, then one `{test_id, ids}`
//!   line per test example (a single `{ids}` line for corpus-level sets)
//! - `predictions.jsonl`: one prediction per line
//! - `metrics.json`: the metric report
//! - `manifest.json`: config hash, timestamps and request accounting
//!
//! Only the manifest carries timestamps, so reruns leave the other files
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backend::{build_backend, BackendError, Client, ResponseCache, StatsSnapshot};
use crate::config::{ConfigError, InferencerKind, RetrieverKind, RunConfig, Templates};
use crate::dataset::{load_dataset_in, Dataset, DatasetError, Example};
use crate::evaluator::{prediction_texts, EvalError, EvaluatorSpec, MetricReport};
use crate::inferencer::{
    channel_infer, cot_infer, direct_infer, gen_infer, ppl_infer, InferenceError, Prediction, ScoringOptions,
};
use crate::prompt::PromptBuilder;
use crate::retriever::{
    bm25_contexts, embed_corpus, mdl_contexts, random_retrieve, topk_retrieve_ordered, votek_select, Bm25Index,
    ContextMode, ContextSet, EmbeddingStore, RetrieverError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("backend setup failed: {0}")]
    BackendSetup(BackendError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("length mismatch: no prediction for test_id {0}")]
    MissingPrediction(usize),
    #[error("{}:{line}: malformed record: {message}", path.display())]
    MalformedRecord { path: PathBuf, line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 for backend failures that stop the run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::BackendSetup(_) | PipelineError::Retriever(RetrieverError::Backend(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub no_cache: bool,
    /// Use this contexts file instead of running the retriever.
    pub contexts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub n_test: usize,
    pub n_failed: usize,
    pub metric: String,
    pub value: f64,
    pub backend_requests: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_hit_rate: f64,
    pub peak_in_flight: usize,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub contexts_path: PathBuf,
    pub predictions_path: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    pub contexts: ContextSet,
    pub predictions: Vec<Prediction>,
    pub metrics: MetricReport,
    pub manifest: Manifest,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

struct Session {
    config: RunConfig,
    base: PathBuf,
    templates: Templates,
    dataset: Dataset,
    cache_dir: PathBuf,
    output_dir: PathBuf,
    opts: RunOptions,
    client: Option<Client>,
}

impl Session {
    fn open(config: &RunConfig, base: &Path, opts: &RunOptions) -> Result<Session, PipelineError> {
        let templates = config.validate()?;
        let dataset = load_dataset_in(&config.dataset, base)?;
        Ok(Session {
            config: config.clone(),
            base: base.to_path_buf(),
            templates,
            dataset,
            cache_dir: opts.cache_dir.clone().unwrap_or_else(|| resolve(base, &config.cache_dir)),
            output_dir: opts.output_dir.clone().unwrap_or_else(|| resolve(base, &config.output_dir)),
            opts: opts.clone(),
            client: None,
        })
    }

    fn client(&mut self) -> Result<&Client, PipelineError> {
        if self.client.is_none() {
            let backend = build_backend(&self.config.backend, &self.base).map_err(PipelineError::BackendSetup)?;
            let cache = if self.opts.no_cache {
                None
            } else {
                let dir = self.cache_dir.join("responses");
                Some(ResponseCache::open(&dir).map_err(io_err(&dir))?)
            };
            let mut client = Client::new(Arc::clone(&backend), &self.config.backend).with_cache(cache);
            if let Some(n) = self.opts.concurrency {
                client = client.with_max_concurrency(n);
            }
            self.client = Some(client);
        }
        Ok(self.client.as_ref().expect("just built"))
    }

    fn stats(&self) -> StatsSnapshot {
        self.client.as_ref().map(Client::stats).unwrap_or_default()
    }

    fn embedding_store(&self) -> Result<EmbeddingStore, PipelineError> {
        if self.opts.no_cache {
            return Ok(EmbeddingStore::in_memory());
        }
        let path = self.cache_dir.join("embeddings.jsonl");
        EmbeddingStore::open(&path).map_err(io_err(&path))
    }

    fn retrieval_texts(&self, examples: &[Example]) -> Vec<String> {
        match &self.config.retriever.text_columns {
            Some(cols) => examples
                .iter()
                .map(|e| cols.iter().map(|c| e.field(c).unwrap_or("")).collect::<Vec<_>>().join(" "))
                .collect(),
            None => examples.iter().map(|e| self.dataset.input_text(e)).collect(),
        }
    }

    fn retrieve(&mut self) -> Result<ContextSet, PipelineError> {
        let r = self.config.retriever.clone();
        let (n_index, n_test) = (self.dataset.index.len(), self.dataset.test.len());
        if r.kind == RetrieverKind::Votek {
            let select_k = r.select_k.unwrap_or(r.ice_num);
            if select_k == 0 {
                return Ok(ContextSet::corpus_level(0, Vec::new()));
            }
            let mut store = self.embedding_store()?;
            let texts = self.retrieval_texts(&self.dataset.index);
            let emb = embed_corpus(self.client()?, &texts, &mut store)?;
            return Ok(votek_select(&emb, select_k, r.graph_k, r.discount_base)?);
        }
        if r.ice_num == 0 {
            return Ok(ContextSet::instance_level(0, vec![Vec::new(); n_test]));
        }
        let contexts = match r.kind {
            RetrieverKind::Random => random_retrieve(n_index, n_test, r.ice_num, r.seed),
            RetrieverKind::Bm25 => {
                let index = Bm25Index::build(&self.retrieval_texts(&self.dataset.index), r.k1, r.b)?;
                bm25_contexts(&index, &self.retrieval_texts(&self.dataset.test), r.ice_num, r.order)
            }
            RetrieverKind::Topk | RetrieverKind::TopkMdl => {
                let mut store = self.embedding_store()?;
                let index_texts = self.retrieval_texts(&self.dataset.index);
                let test_texts = self.retrieval_texts(&self.dataset.test);
                let client = self.client()?;
                let index = embed_corpus(client, &index_texts, &mut store)?;
                let queries = embed_corpus(client, &test_texts, &mut store)?;
                let topk = topk_retrieve_ordered(&index, &queries, r.ice_num, r.order)?;
                if r.kind == RetrieverKind::Topk {
                    topk
                } else {
                    let labels = self.dataset.label_space.clone().ok_or(RetrieverError::EmptyLabelSpace)?;
                    let builder = PromptBuilder::new(&self.templates.main, &self.dataset)
                        .with_verbalizers(self.config.inferencer.verbalizers.as_ref());
                    let client = self.client.as_ref().expect("built above");
                    mdl_contexts(client, &topk, &builder, &self.dataset.test, &labels, &r.mdl)?
                }
            }
            RetrieverKind::Votek => unreachable!("handled above"),
        };
        Ok(contexts)
    }

    fn infer(&mut self, contexts: &ContextSet) -> Result<Vec<Prediction>, PipelineError> {
        self.client()?;
        let client = self.client.as_ref().expect("built above");
        let inf = &self.config.inferencer;
        let labels = || self.dataset.label_space.clone().ok_or(InferenceError::EmptyLabelSpace);
        let opts = ScoringOptions { verbalizers: inf.verbalizers.clone(), ppl_scope: inf.ppl_scope };
        let t = &self.templates;
        let ds = &self.dataset;
        let preds = match inf.kind {
            InferencerKind::Ppl => ppl_infer(client, contexts, &t.main, ds, &labels()?, &opts)?,
            InferencerKind::Direct => direct_infer(client, contexts, &t.main, ds, &labels()?, &opts)?,
            InferencerKind::Channel => {
                let inverse = t.inverse.as_ref().expect("validated: channel has an inverse template");
                channel_infer(client, contexts, inverse, ds, &labels()?, &opts)?
            }
            InferencerKind::Gen => gen_infer(client, contexts, &t.main, ds, &inf.gen_params())?,
            InferencerKind::Cot => {
                let cot = inf.cot_list.clone().unwrap_or_default();
                cot_infer(client, contexts, &t.main, ds, &cot, &inf.gen_params())?
            }
        };
        Ok(preds)
    }
}

#[derive(Serialize, Deserialize)]
struct ContextsHeader {
    mode: ContextMode,
    ice_num: usize,
}

#[derive(Serialize, Deserialize)]
struct ContextsRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_id: Option<usize>,
    ids: Vec<usize>,
}

fn write_lines<T: Serialize>(path: &Path, header: Option<String>, rows: &[T]) -> Result<(), PipelineError> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h);
        out.push('\n');
    }
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn write_contexts(path: &Path, contexts: &ContextSet) -> Result<(), PipelineError> {
    let header = ContextsHeader { mode: contexts.mode, ice_num: contexts.ice_num };
    let rows: Vec<ContextsRow> = contexts
        .contexts
        .iter()
        .enumerate()
        .map(|(t, ids)| ContextsRow {
            test_id: (contexts.mode == ContextMode::InstanceLevel).then_some(t),
            ids: ids.clone(),
        })
        .collect();
    write_lines(path, Some(serde_json::to_string(&header).expect("header serializes")), &rows)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_contexts(path: &Path) -> Result<ContextSet, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let malformed = |line: usize, message: String| PipelineError::MalformedRecord { path: path.to_path_buf(), line, message };
    let (_, first) = lines.next().ok_or_else(|| malformed(1, "missing header".into()))?;
    let header: ContextsHeader = serde_json::from_str(first).map_err(|e| malformed(1, e.to_string()))?;
    let mut contexts = Vec::new();
    for (i, l) in lines {
        let row: ContextsRow = serde_json::from_str(l).map_err(|e| malformed(i + 1, e.to_string()))?;
        if header.mode == ContextMode::InstanceLevel && row.test_id != Some(contexts.len()) {
            return Err(malformed(i + 1, format!("expected test_id {}", contexts.len())));
        }
        contexts.push(row.ids);
    }
    Ok(ContextSet { mode: header.mode, ice_num: header.ice_num, contexts })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), PipelineError> {
    write_lines(path, None, predictions)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, PipelineError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub test_id: usize,
    pub reference: String,
}

/// Reads `{test_id, reference}` records, ordered by test id.
pub fn read_references(path: &Path) -> Result<Vec<String>, PipelineError> {
    let mut records: Vec<ReferenceRecord> = read_jsonl(path)?;
    records.sort_by_key(|r| r.test_id);
    for (i, r) in records.iter().enumerate() {
        if r.test_id != i {
            return Err(PipelineError::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("test ids must run 0..n without gaps; found {}", r.test_id),
            });
        }
    }
    Ok(records.into_iter().map(|r| r.reference).collect())
}

/// Retrieval stage only; writes and returns the contexts file.
pub fn retrieve_only(config: &RunConfig, base: &Path, opts: &RunOptions) -> Result<(PathBuf, ContextSet), PipelineError> {
    let mut s = Session::open(config, base, opts)?;
    let contexts = s.retrieve()?;
    let path = s.output_dir.join("contexts.jsonl");
    write_contexts(&path, &contexts)?;
    Ok((path, contexts))
}

/// Scores predictions against references, matching them by test id.
pub fn eval_only(
    predictions: &[Prediction],
    references: &[String],
    evaluator: &EvaluatorSpec,
) -> Result<MetricReport, PipelineError> {
    let mut by_id: BTreeMap<usize, &Prediction> = BTreeMap::new();
    for p in predictions {
        by_id.insert(p.test_id, p);
    }
    let mut ordered = Vec::with_capacity(references.len());
    for t in 0..references.len() {
        ordered.push((*by_id.get(&t).ok_or(PipelineError::MissingPrediction(t))?).clone());
    }
    if by_id.len() != references.len() {
        return Err(EvalError::LengthMismatch { predictions: by_id.len(), references: references.len() }.into());
    }
    Ok(evaluator.evaluate(&prediction_texts(&ordered), references)?)
}

/// Load, retrieve (or read `opts.contexts`), infer, evaluate and write artifacts.
pub fn run_pipeline(config: &RunConfig, base: &Path, opts: &RunOptions) -> Result<RunArtifacts, PipelineError> {
    let started_at_ms = now_ms();
    let mut s = Session::open(config, base, opts)?;
    let contexts = match &opts.contexts {
        Some(path) => {
            let c = read_contexts(path)?;
            c.validate(s.dataset.index.len(), s.dataset.test.len())?;
            c
        }
        None => s.retrieve()?,
    };
    let predictions = s.infer(&contexts)?;
    let metrics = config.evaluator.evaluate(&prediction_texts(&predictions), &s.dataset.references())?;

    let out = s.output_dir.clone();
    let contexts_path = out.join("contexts.jsonl");
    let predictions_path = out.join("predictions.jsonl");
    let metrics_path = out.join("metrics.json");
    let manifest_path = out.join("manifest.json");
    write_contexts(&contexts_path, &contexts)?;
    write_predictions(&predictions_path, &predictions)?;
    let mut metrics_json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    metrics_json.push('\n');
    write_atomic(&metrics_path, metrics_json.as_bytes())?;

    let stats = s.stats();
    let manifest = Manifest {
        config_hash: config.hash(),
        started_at_ms,
        finished_at_ms: now_ms(),
        n_test: predictions.len(),
        n_failed: metrics.n_failed,
        metric: metrics.metric.clone(),
        value: metrics.value,
        backend_requests: stats.backend_requests,
        cache_hits: stats.cache_hits,
        cache_misses: stats.cache_misses,
        cache_hit_rate: stats.cache_hit_rate(),
        peak_in_flight: stats.peak_in_flight,
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    write_atomic(&manifest_path, manifest_json.as_bytes())?;

    Ok(RunArtifacts {
        output_dir: out,
        contexts_path,
        predictions_path,
        metrics_path,
        manifest_path,
        contexts,
        predictions,
        metrics,
        manifest,
    })
}
