#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use icl_core::backend::{BackendSpec, Client, CueRule, Fixture, MockBackend};
use icl_core::dataset::{DataFormat, Dataset, DatasetSpec, Example, Source, SplitSpec};

pub fn example(id: usize, pairs: &[(&str, &str)]) -> Example {
    Example { id, fields: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
}

pub fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// In-memory dataset over columns `q` (input) and `a` (output).
pub fn qa_dataset(index: &[(&str, &str)], test: &[(&str, &str)], labels: Option<&[&str]>) -> Dataset {
    let rows = |xs: &[(&str, &str)]| -> Vec<Example> {
        xs.iter().enumerate().map(|(i, (q, a))| example(i, &[("q", q), ("a", a)])).collect()
    };
    Dataset {
        spec: DatasetSpec {
            source: None,
            format: DataFormat::Jsonl,
            input_columns: vec!["q".into()],
            output_column: "a".into(),
            split: SplitSpec::Sources { index: Source::Inline(vec![]), test: Source::Inline(vec![]) },
            classification: Some(labels.is_some()),
        },
        index: rows(index),
        test: rows(test),
        label_space: labels.map(strings),
    }
}

pub fn mock_client(fixture: Fixture) -> Client {
    Client::new(Arc::new(MockBackend::new("mock", fixture)), &BackendSpec::default())
}

/// Brute-force cosine ranking from raw rows: score every row, full sort,
/// ties to the lower id.
pub fn cosine_oracle(index: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(usize, f64)> = index
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rn = norm(r);
            let dot: f64 = r.iter().zip(query).map(|(a, b)| a * b).sum();
            let s = if rn == 0.0 || qn == 0.0 { 0.0 } else { dot / (rn * qn) };
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Okapi BM25 applied document by document, straight from the formula.
pub fn bm25_oracle_scores(docs: &[String], query: &str, k1: f64, b: f64) -> Vec<f64> {
    let toks: Vec<Vec<String>> = docs.iter().map(|d| oracle_tokens(d)).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut seen = HashSet::new();
    let terms: Vec<String> = oracle_tokens(query).into_iter().filter(|t| seen.insert(t.clone())).collect();
    toks.iter()
        .map(|doc| {
            let mut counts: HashMap<&str, f64> = HashMap::new();
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1.0;
            }
            let dl = doc.len() as f64;
            let mut score = 0.0;
            for t in &terms {
                let f = counts.get(t.as_str()).copied().unwrap_or(0.0);
                if f == 0.0 {
                    continue;
                }
                let df = toks.iter().filter(|d| d.contains(t)).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                score += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * dl / avgdl));
            }
            score
        })
        .collect()
}

pub fn bm25_oracle(docs: &[String], query: &str, k: usize) -> Vec<usize> {
    let scores = bm25_oracle_scores(docs, query, 1.5, 0.75);
    let mut ids: Vec<usize> = (0..docs.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Twenty sentiment examples whose label is cued by one word in the text,
/// with a fixture that makes the cued label word near-certain.
pub struct CueTask {
    pub index: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub fixture: Fixture,
}

pub fn cue_task() -> CueTask {
    let nouns = ["film", "book", "meal", "song", "show", "game", "trip", "play", "hotel", "album"];
    let row = |i: usize| {
        let positive = i.is_multiple_of(2);
        let (cue, label) = if positive { ("great", "positive") } else { ("awful", "negative") };
        (format!("review {i}: the {} was {cue}", nouns[i % nouns.len()]), label.to_string())
    };
    let index = (0..20).map(|i| row(i + 101)).collect();
    let test = (0..20).map(row).collect();
    let rule = |cue: &str, token: &str| CueRule { cue: cue.into(), token: token.into(), logprob: -0.1, window: 4 };
    let fixture = Fixture {
        rules: vec![rule("great", "positive"), rule("awful", "negative")],
        ..Fixture::default()
    };
    CueTask { index, test, fixture }
}

pub fn write_jsonl_rows(path: &Path, rows: &[(String, String)], input: &str, output: &str) {
    let mut out = String::new();
    for (x, y) in rows {
        let obj: BTreeMap<&str, &str> = [(input, x.as_str()), (output, y.as_str())].into();
        out.push_str(&serde_json::to_string(&obj).unwrap());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

/// Writes the cue task's data and fixture under `dir` and returns a run
/// config with the given retriever and inferencer blocks.
pub fn cue_config(dir: &Path, retriever: &str, inferencer: &str) -> String {
    let task = cue_task();
    write_jsonl_rows(&dir.join("index.jsonl"), &task.index, "text", "label");
    write_jsonl_rows(&dir.join("test.jsonl"), &task.test, "text", "label");
    std::fs::write(dir.join("fixture.json"), serde_json::to_string(&task.fixture).unwrap()).unwrap();
    format!(
        r#"{{
  "dataset": {{"input_columns": ["text"], "output_column": "label",
              "split": {{"sources": {{"index": "index.jsonl", "test": "test.jsonl"}}}}}},
  "template": {{"body": "</E></T> => </L>", "column_tokens": {{"text": "</T>", "label": "</L>"}}, "ice_token": "</E>", "separator": "\n"}},
  "inverse_template": {{"body": "</E></L> review: </T>", "column_tokens": {{"text": "</T>", "label": "</L>"}}, "ice_token": "</E>", "separator": "\n"}},
  "retriever": {retriever},
  "inferencer": {inferencer},
  "backend": {{"kind": "mock", "fixture": "fixture.json", "max_concurrency": 4}},
  "evaluator": {{"kind": "accuracy"}},
  "cache_dir": "cache",
  "output_dir": "out"
}}"#
    )
}
