//! Reranking candidate contexts by the entropy of the model's label
//! distribution: the context under which the answer is cheapest to encode
//! wins.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContextSet, RetrieverError};
use crate::backend::Client;
use crate::dataset::Example;
use crate::prompt::{PromptBuilder, ScoredPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdlOptions {
    /// Shuffled orderings of the TopK set to compare.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for MdlOptions {
    fn default() -> Self {
        Self { candidates: 8, seed: 0 }
    }
}

/// Entropy in nats of softmax(`logprob_sums`).
pub fn label_entropy(logprob_sums: &[f64]) -> f64 {
    let max = logprob_sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logprob_sums.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights
        .iter()
        .map(|w| w / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn candidate_pairs(
    builder: &PromptBuilder,
    candidate: &[usize],
    query: &Example,
    labels: &[String],
) -> Result<Vec<ScoredPair>, RetrieverError> {
    let demos = builder.demonstrations(candidate)?;
    Ok(builder.direct_pairs(&demos, query, labels)?)
}

/// Index of the lowest-entropy candidate; the earliest wins ties.
/// Candidates whose scoring failed are `None` and never win.
fn pick(entropies: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in entropies.iter().enumerate() {
        if let Some(h) = *h {
            if best.is_none_or(|(_, b)| h < b) {
                best = Some((i, h));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn score_candidates(
    client: &Client,
    builder: &PromptBuilder,
    jobs: &[(&Example, Vec<Vec<usize>>)],
    labels: &[String],
) -> Result<Vec<Vec<Option<f64>>>, RetrieverError> {
    let mut pairs = Vec::new();
    for (query, candidates) in jobs {
        for c in candidates {
            pairs.extend(candidate_pairs(builder, c, query, labels)?);
        }
    }
    let mut results = client.score_batch(&pairs).into_iter();
    Ok(jobs
        .iter()
        .map(|(_, candidates)| {
            candidates
                .iter()
                .map(|_| {
                    let chunk: Vec<_> = results.by_ref().take(labels.len()).collect();
                    let scores: Result<Vec<f64>, _> =
                        chunk.into_iter().map(|r| r.map(|s| s.continuation_logprob_sum)).collect();
                    match scores {
                        Ok(s) => Some(label_entropy(&s)),
                        Err(e) => {
                            log::warn!("mdl candidate scoring failed: {e}");
                            None
                        }
                    }
                })
                .collect()
        })
        .collect())
}

/// Picks the candidate context under which the label distribution for
/// `query` has the lowest entropy.
pub fn mdl_rerank(
    client: &Client,
    candidates: &[Vec<usize>],
    builder: &PromptBuilder,
    query: &Example,
    label_space: &[String],
) -> Result<Vec<usize>, RetrieverError> {
    if label_space.is_empty() {
        return Err(RetrieverError::EmptyLabelSpace);
    }
    if candidates.is_empty() {
        return Err(RetrieverError::NoCandidates);
    }
    let entropies = score_candidates(client, builder, &[(query, candidates.to_vec())], label_space)?;
    let i = pick(&entropies[0]).ok_or(RetrieverError::NoCandidates)?;
    Ok(candidates[i].clone())
}

/// Seeded shuffles of `base`, duplicates removed.
fn shuffles(base: &[usize], opts: &MdlOptions, test_id: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(test_id as u64);
    let mut out: Vec<Vec<usize>> = Vec::new();
    for _ in 0..opts.candidates.max(1) {
        let mut c = base.to_vec();
        c.shuffle(&mut rng);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Reorders each TopK context by MDL. A test example whose candidates all
/// fail to score keeps its TopK order.
pub fn mdl_contexts(
    client: &Client,
    topk: &ContextSet,
    builder: &PromptBuilder,
    queries: &[Example],
    label_space: &[String],
    opts: &MdlOptions,
) -> Result<ContextSet, RetrieverError> {
    if label_space.is_empty() {
        return Err(RetrieverError::EmptyLabelSpace);
    }
    let jobs: Vec<(&Example, Vec<Vec<usize>>)> = queries
        .iter()
        .enumerate()
        .map(|(t, q)| (q, shuffles(topk.context_for(t), opts, t)))
        .collect();
    let entropies = score_candidates(client, builder, &jobs, label_space)?;
    let contexts = jobs
        .iter()
        .zip(&entropies)
        .enumerate()
        .map(|(t, ((_, cands), h))| match pick(h) {
            Some(i) => cands[i].clone(),
            None => topk.context_for(t).to_vec(),
        })
        .collect();
    Ok(ContextSet::instance_level(topk.ice_num, contexts))
}
