//! Okapi BM25 over the index split.
//!
//! score(q, d) = Σ_{t ∈ q} IDF(t) · f(t,d)·(k1+1) / (f(t,d) + k1·(1 − b + b·|d|/avgdl))
//! IDF(t)      = ln((N − df(t) + 0.5) / (df(t) + 0.5) + 1)
//!
//! Query terms are deduplicated. Ranking is by descending score, then
//! ascending document id.

use std::collections::{HashMap, HashSet};

use super::{ContextSet, DemoOrder, RetrieverError};
use crate::par;

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn bm25_tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lens: Vec<usize>,
    doc_freqs: HashMap<String, usize>,
    avgdl: f64,
}

impl Bm25Index {
    pub const DEFAULT_K1: f64 = 1.5;
    pub const DEFAULT_B: f64 = 0.75;

    pub fn build(texts: &[String], k1: f64, b: f64) -> Result<Bm25Index, RetrieverError> {
        if texts.is_empty() {
            return Err(RetrieverError::EmptyCorpus);
        }
        let term_freqs: Vec<HashMap<String, u32>> = par::map(texts, |t| {
            let mut tf = HashMap::new();
            for tok in bm25_tokenize(t) {
                *tf.entry(tok).or_insert(0) += 1;
            }
            tf
        });
        let doc_lens: Vec<usize> = term_freqs.iter().map(|tf| tf.values().map(|&c| c as usize).sum()).collect();
        let mut doc_freqs = HashMap::new();
        for tf in &term_freqs {
            for term in tf.keys() {
                *doc_freqs.entry(term.clone()).or_insert(0) += 1;
            }
        }
        let avgdl = doc_lens.iter().sum::<usize>() as f64 / texts.len() as f64;
        Ok(Bm25Index { k1, b, term_freqs, doc_lens, doc_freqs, avgdl })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, id: usize) -> usize {
        self.doc_lens[id]
    }

    pub fn df(&self, term: &str) -> usize {
        self.doc_freqs.get(term).copied().unwrap_or(0)
    }

    pub fn tf(&self, id: usize, term: &str) -> u32 {
        self.term_freqs[id].get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn score_terms(&self, terms: &[(String, f64)], id: usize) -> f64 {
        let dl = self.doc_lens[id] as f64;
        let mut score = 0.0;
        for (term, idf) in terms {
            let f = self.tf(id, term) as f64;
            if f == 0.0 {
                continue;
            }
            score += idf * f * (self.k1 + 1.0) / (f + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl));
        }
        score
    }

    fn query_terms(&self, query: &str) -> Vec<(String, f64)> {
        let mut seen = HashSet::new();
        bm25_tokenize(query)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .map(|t| {
                let idf = self.idf(&t);
                (t, idf)
            })
            .collect()
    }

    pub fn score(&self, query: &str, id: usize) -> f64 {
        self.score_terms(&self.query_terms(query), id)
    }

    /// Top `k` documents as `(id, score)`, most similar first.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let terms = self.query_terms(query);
        let mut scored: Vec<(usize, f64)> = (0..self.n_docs()).map(|id| (id, self.score_terms(&terms, id))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

/// Ids of the top `k` documents, most similar first.
pub fn bm25_retrieve(index: &Bm25Index, query_text: &str, k: usize) -> Vec<usize> {
    index.retrieve(query_text, k).into_iter().map(|(id, _)| id).collect()
}

/// Instance-level contexts for a batch of queries.
pub fn bm25_contexts(index: &Bm25Index, queries: &[String], ice_num: usize, order: DemoOrder) -> ContextSet {
    let contexts = par::map(queries, |q| order.arrange(bm25_retrieve(index, q, ice_num)));
    ContextSet::instance_level(ice_num, contexts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(d: &[&str]) -> Vec<String> {
        d.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer() {
        assert_eq!(bm25_tokenize("Hello, World! x-y_z 42"), vec!["hello", "world", "x", "y", "z", "42"]);
        assert!(bm25_tokenize("  ,,, ").is_empty());
    }

    #[test]
    fn counting() {
        let idx = Bm25Index::build(&docs(&["a b", "a c"]), 1.5, 0.75).unwrap();
        assert_eq!(idx.n_docs(), 2);
        assert_eq!(idx.avgdl(), 2.0);
        assert_eq!(idx.df("a"), 2);
        assert_eq!(idx.df("c"), 1);
    }

    #[test]
    fn single_doc_avgdl() {
        let idx = Bm25Index::build(&docs(&["one two three"]), 1.5, 0.75).unwrap();
        assert_eq!(idx.avgdl(), 3.0);
    }

    #[test]
    fn idf_of_absent_term() {
        let idx = Bm25Index::build(&docs(&["a b", "a c"]), 1.5, 0.75).unwrap();
        assert_eq!(idx.idf("zzz"), ((2.0 + 0.5) / 0.5 + 1.0_f64).ln());
    }

    #[test]
    fn hand_value() {
        // df(c)=1, N=2: IDF = ln(1.5/1.5 + 1) = ln 2; f=1 and |d| = avgdl so the ratio is 1.
        let idx = Bm25Index::build(&docs(&["a b", "a c"]), 1.5, 0.75).unwrap();
        let top = idx.retrieve("c", 1);
        assert_eq!(top[0].0, 1);
        assert!((top[0].1 - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn no_matching_terms_falls_back_to_id_order() {
        let idx = Bm25Index::build(&docs(&["a b", "a c", "d"]), 1.5, 0.75).unwrap();
        assert_eq!(bm25_retrieve(&idx, "zzz", 3), vec![0, 1, 2]);
        assert_eq!(bm25_retrieve(&idx, "", 2), vec![0, 1]);
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(Bm25Index::build(&[], 1.5, 0.75), Err(RetrieverError::EmptyCorpus)));
    }

    #[test]
    fn empty_documents_do_not_poison_scores() {
        let idx = Bm25Index::build(&docs(&["", "", ""]), 1.5, 0.75).unwrap();
        assert_eq!(idx.score("a", 0), 0.0);
    }

    #[test]
    fn contexts_place_nearest_last() {
        let idx = Bm25Index::build(&docs(&["cat", "dog", "cat cat fish"]), 1.5, 0.75).unwrap();
        let c = bm25_contexts(&idx, &docs(&["cat"]), 2, DemoOrder::NearestLast);
        let ranked = bm25_retrieve(&idx, "cat", 2);
        assert_eq!(c.contexts[0], vec![ranked[1], ranked[0]]);
    }
}
