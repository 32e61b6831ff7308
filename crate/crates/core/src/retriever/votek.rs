//! Graph-based diverse selection.
//!
//! Each index example votes for its `graph_k` nearest neighbours. Selection is
//! greedy: a candidate u scores Σ base^(−s(v)) over the unselected examples v
//! that vote for u, where s(v) counts already selected examples among v's
//! neighbours. Voters whose neighbourhood is already covered count for less,
//! which pushes later picks into other regions.

use super::{embedding::topk_ranked, ContextSet, EmbeddingMatrix, RetrieverError};
use crate::par;

/// `graph_k` nearest neighbours of every row, excluding the row itself.
pub fn knn_graph(emb: &EmbeddingMatrix, graph_k: usize) -> Vec<Vec<usize>> {
    let k = graph_k.min(emb.len().saturating_sub(1));
    par::map_range(emb.len(), |u| {
        topk_ranked(emb, emb.row(u), k + 1)
            .into_iter()
            .map(|(id, _)| id)
            .filter(|&id| id != u)
            .take(k)
            .collect()
    })
}

/// Corpus-level selection of `select_k` index examples.
pub fn votek_select(
    emb: &EmbeddingMatrix,
    select_k: usize,
    graph_k: usize,
    discount_base: f64,
) -> Result<ContextSet, RetrieverError> {
    let n = emb.len();
    if select_k > n {
        return Err(RetrieverError::SelectKTooLarge { select_k, available: n });
    }
    let graph = knn_graph(emb, graph_k);
    let mut voters: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (v, nbrs) in graph.iter().enumerate() {
        for &u in nbrs {
            voters[u].push(v);
        }
    }

    let mut selected = vec![false; n];
    let mut covered = vec![0i32; n];
    let mut picks = Vec::with_capacity(select_k);
    for _ in 0..select_k {
        let scores = par::map_range(n, |u| {
            if selected[u] {
                return f64::NEG_INFINITY;
            }
            voters[u]
                .iter()
                .filter(|&&v| !selected[v])
                .map(|&v| discount_base.powi(-covered[v]))
                .sum::<f64>()
        });
        let mut best = None;
        for (u, &s) in scores.iter().enumerate() {
            if selected[u] {
                continue;
            }
            match best {
                Some((_, bs)) if s <= bs => {}
                _ => best = Some((u, s)),
            }
        }
        let (u, _) = best.expect("select_k <= n leaves a candidate");
        selected[u] = true;
        picks.push(u);
        for &v in &voters[u] {
            covered[v] += 1;
        }
    }
    Ok(ContextSet::corpus_level(select_k, picks))
}
