//! Metrics over predictions and references.
//!
//! Predictions are passed as `Option<&str>`; `None` marks a failed slot,
//! which counts as incorrect (accuracy) or as an empty candidate (BLEU).

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::inferencer::Prediction;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{predictions} predictions for {references} references")]
    LengthMismatch { predictions: usize, references: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDetail {
    pub index: usize,
    pub prediction: Option<String>,
    pub reference: String,
    /// Per-instance correctness; `None` for corpus-level metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_scored: usize,
    pub n_failed: usize,
    pub details: Vec<InstanceDetail>,
}

/// Evaluator selection as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    Accuracy {
        #[serde(default = "yes")]
        normalize: bool,
    },
    Bleu {
        #[serde(default = "four")]
        max_n: usize,
        #[serde(default)]
        smoothing: bool,
    },
    NumericAccuracy,
}

fn yes() -> bool {
    true
}

fn four() -> usize {
    4
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec::Accuracy { normalize: true }
    }
}

impl EvaluatorSpec {
    pub fn evaluate<R: AsRef<str>>(
        &self,
        predictions: &[Option<&str>],
        references: &[R],
    ) -> Result<MetricReport, EvalError> {
        match *self {
            EvaluatorSpec::Accuracy { normalize } => accuracy(predictions, references, normalize),
            EvaluatorSpec::Bleu { max_n, smoothing } => bleu(predictions, references, max_n, smoothing),
            EvaluatorSpec::NumericAccuracy => numeric_accuracy(predictions, references),
        }
    }
}

/// Predicted texts with failed slots as `None`.
pub fn prediction_texts(predictions: &[Prediction]) -> Vec<Option<&str>> {
    predictions
        .iter()
        .map(|p| if p.is_failed() { None } else { Some(p.predicted.as_str()) })
        .collect()
}

fn check_lengths<R>(predictions: &[Option<&str>], references: &[R]) -> Result<(), EvalError> {
    if predictions.len() != references.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), references: references.len() });
    }
    Ok(())
}

/// Trims, collapses internal whitespace runs to one space and lowercases.
pub fn normalize_answer(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn match_report<R: AsRef<str>>(
    metric: &str,
    predictions: &[Option<&str>],
    references: &[R],
    matches: impl Fn(&str, &str) -> bool,
) -> MetricReport {
    let details: Vec<InstanceDetail> = predictions
        .iter()
        .zip(references)
        .enumerate()
        .map(|(index, (p, r))| InstanceDetail {
            index,
            prediction: p.map(str::to_string),
            reference: r.as_ref().to_string(),
            correct: Some(p.is_some_and(|p| matches(p, r.as_ref()))),
        })
        .collect();
    let n_failed = predictions.iter().filter(|p| p.is_none()).count();
    let correct = details.iter().filter(|d| d.correct == Some(true)).count();
    let value = if details.is_empty() { 0.0 } else { correct as f64 / details.len() as f64 };
    MetricReport { metric: metric.to_string(), value, n_scored: details.len() - n_failed, n_failed, details }
}

pub fn accuracy<R: AsRef<str>>(
    predictions: &[Option<&str>],
    references: &[R],
    normalize: bool,
) -> Result<MetricReport, EvalError> {
    check_lengths(predictions, references)?;
    Ok(match_report("accuracy", predictions, references, |p, r| {
        if normalize { normalize_answer(p) == normalize_answer(r) } else { p == r }
    }))
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[+-]?\d(?:[\d,]*\d)?(?:\.\d+)?").unwrap());

/// The last number in `text` with thousands commas and a leading '+'
/// removed, or "" when there is none.
pub fn extract_numeric_answer(text: &str) -> String {
    match NUMBER.find_iter(text).last() {
        Some(m) => {
            let s = m.as_str().replace(',', "");
            s.strip_prefix('+').map(str::to_string).unwrap_or(s)
        }
        None => String::new(),
    }
}

/// Exact match after extracting the final number from both sides.
pub fn numeric_accuracy<R: AsRef<str>>(
    predictions: &[Option<&str>],
    references: &[R],
) -> Result<MetricReport, EvalError> {
    check_lengths(predictions, references)?;
    Ok(match_report("numeric_accuracy", predictions, references, |p, r| {
        extract_numeric_answer(p) == extract_numeric_answer(r)
    }))
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over whitespace tokens with clipped n-gram precisions and a
/// brevity penalty. Orders for which the candidate corpus has no n-grams at
/// all are left out of the geometric mean. With `smoothing`, orders n ≥ 2 use
/// (matches + 1) / (total + 1).
pub fn bleu<R: AsRef<str>>(
    predictions: &[Option<&str>],
    references: &[R],
    max_n: usize,
    smoothing: bool,
) -> Result<MetricReport, EvalError> {
    check_lengths(predictions, references)?;
    let max_n = max_n.max(1);
    let mut matches = vec![0usize; max_n + 1];
    let mut totals = vec![0usize; max_n + 1];
    let (mut c, mut r) = (0usize, 0usize);
    for (p, reference) in predictions.iter().zip(references) {
        let cand: Vec<&str> = p.unwrap_or("").split_whitespace().collect();
        let refs: Vec<&str> = reference.as_ref().split_whitespace().collect();
        c += cand.len();
        r += refs.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&refs, n);
            for (gram, count) in ngram_counts(&cand, n) {
                matches[n] += count.min(rc.get(gram).copied().unwrap_or(0));
                totals[n] += count;
            }
        }
    }

    let value = if c == 0 {
        0.0
    } else {
        let mut log_sum = 0.0;
        let mut orders = 0usize;
        let mut zero = false;
        for n in 1..=max_n {
            if totals[n] == 0 {
                continue;
            }
            orders += 1;
            let p = if smoothing && n >= 2 {
                (matches[n] + 1) as f64 / (totals[n] + 1) as f64
            } else {
                matches[n] as f64 / totals[n] as f64
            };
            if p == 0.0 {
                zero = true;
                break;
            }
            log_sum += p.ln();
        }
        if zero {
            0.0
        } else {
            let bp = if c <= r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
            (bp * (log_sum / orders as f64).exp()).min(1.0)
        }
    };

    let details = predictions
        .iter()
        .zip(references)
        .enumerate()
        .map(|(index, (p, r))| InstanceDetail {
            index,
            prediction: p.map(str::to_string),
            reference: r.as_ref().to_string(),
            correct: None,
        })
        .collect();
    let n_failed = predictions.iter().filter(|p| p.is_none()).count();
    Ok(MetricReport {
        metric: format!("bleu-{max_n}"),
        value,
        n_scored: predictions.len() - n_failed,
        n_failed,
        details,
    })
}
