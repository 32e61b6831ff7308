//! Inference strategies: perplexity, direct and channel label scoring, free
//! generation, and multi-stage chain-of-thought generation.
//!
//! Strategies never abort on a single bad example. A failure while building
//! or scoring one test example yields a [`Prediction`] with `error` set and
//! an empty `predicted`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{truncate_at_stop, BackendError, Client, CompletionRequest};
use crate::dataset::{Dataset, Example};
use crate::prompt::{PplScope, PromptBuilder, PromptError, ScoredPair};
use crate::retriever::ContextSet;
use crate::template::Template;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("label space is empty")]
    EmptyLabelSpace,
    #[error("cot_list is empty")]
    EmptyCotList,
    #[error("contexts do not fit the dataset: {0}")]
    Contexts(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub logprob_sum: f64,
    pub token_count: usize,
    pub normalized_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub test_id: usize,
    pub predicted: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, CandidateScore>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Prediction {
    fn ok(test_id: usize, predicted: String) -> Self {
        Self { test_id, predicted, scores: None, trace: Vec::new(), error: None }
    }

    fn failed(test_id: usize, error: impl ToString) -> Self {
        Self { test_id, predicted: String::new(), scores: None, trace: Vec::new(), error: Some(error.to_string()) }
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Label-scoring strategy and its decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    /// Lowest per-token negative log-likelihood of the whole candidate sequence.
    Ppl,
    /// Highest raw log-probability of the verbalized label.
    Direct,
    /// Lowest per-token negative log-likelihood of the input given the label.
    Channel,
}

impl ScoringRule {
    pub fn normalize(self, logprob_sum: f64, token_count: usize) -> f64 {
        match self {
            ScoringRule::Direct => logprob_sum,
            ScoringRule::Ppl | ScoringRule::Channel => -logprob_sum / token_count as f64,
        }
    }

    /// Best label under this rule. Ties go to the earliest label in `label_space`.
    pub fn decide<'a>(self, label_space: &'a [String], scores: &BTreeMap<String, CandidateScore>) -> Option<&'a str> {
        let mut best: Option<(&str, f64)> = None;
        for label in label_space {
            let Some(s) = scores.get(label) else { continue };
            let better = match (self, best) {
                (_, None) => true,
                (ScoringRule::Direct, Some((_, b))) => s.normalized_score > b,
                (_, Some((_, b))) => s.normalized_score < b,
            };
            if better {
                best = Some((label, s.normalized_score));
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Options shared by the label-scoring strategies.
#[derive(Debug, Clone, Default)]
pub struct ScoringOptions {
    /// Surface text for each label; labels without an entry are used verbatim.
    pub verbalizers: Option<BTreeMap<String, String>>,
    pub ppl_scope: PplScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub max_tokens: usize,
    pub stop: Vec<String>,
    pub temperature: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { max_tokens: 64, stop: Vec::new(), temperature: 0.0 }
    }
}

fn check_contexts(contexts: &ContextSet, dataset: &Dataset) -> Result<(), InferenceError> {
    contexts
        .validate(dataset.index.len(), dataset.test.len())
        .map_err(|e| InferenceError::Contexts(e.to_string()))
}

/// Builds every test example's scoring pairs, scores them in one batch and
/// decodes per example.
fn run_scoring<F>(
    client: &Client,
    contexts: &ContextSet,
    builder: &PromptBuilder,
    dataset: &Dataset,
    label_space: &[String],
    rule: ScoringRule,
    pairs_for: F,
) -> Result<Vec<Prediction>, InferenceError>
where
    F: Fn(&[String], &Example) -> Result<Vec<ScoredPair>, PromptError>,
{
    if label_space.is_empty() {
        return Err(InferenceError::EmptyLabelSpace);
    }
    check_contexts(contexts, dataset)?;

    let built: Vec<Result<Vec<ScoredPair>, PromptError>> = dataset
        .test
        .iter()
        .enumerate()
        .map(|(t, ex)| {
            let demos = builder.demonstrations(contexts.context_for(t))?;
            pairs_for(&demos, ex)
        })
        .collect();
    let flat: Vec<ScoredPair> = built.iter().filter_map(|b| b.as_ref().ok()).flatten().cloned().collect();
    let mut results = client.score_batch(&flat).into_iter();

    Ok(built
        .into_iter()
        .enumerate()
        .map(|(t, b)| {
            if let Err(e) = b {
                return Prediction::failed(t, e);
            }
            let mut scores = BTreeMap::new();
            let mut first_error: Option<BackendError> = None;
            for label in label_space {
                match results.next().expect("one result per pair") {
                    Ok(s) => {
                        let normalized_score =
                            rule.normalize(s.continuation_logprob_sum, s.continuation_token_count);
                        scores.insert(
                            label.clone(),
                            CandidateScore {
                                logprob_sum: s.continuation_logprob_sum,
                                token_count: s.continuation_token_count,
                                normalized_score,
                            },
                        );
                    }
                    Err(e) => {
                        first_error.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_error {
                return Prediction::failed(t, format!("label scoring failed: {e}"));
            }
            let predicted = rule.decide(label_space, &scores).unwrap_or_default().to_string();
            Prediction { scores: Some(scores), ..Prediction::ok(t, predicted) }
        })
        .collect())
}

/// Perplexity scoring: the label whose full candidate sequence has the
/// lowest per-token negative log-likelihood.
pub fn ppl_infer(
    client: &Client,
    contexts: &ContextSet,
    template: &Template,
    dataset: &Dataset,
    label_space: &[String],
    opts: &ScoringOptions,
) -> Result<Vec<Prediction>, InferenceError> {
    let builder = PromptBuilder::new(template, dataset).with_verbalizers(opts.verbalizers.as_ref());
    run_scoring(client, contexts, &builder, dataset, label_space, ScoringRule::Ppl, |demos, ex| {
        builder.ppl_pairs(demos, ex, label_space, opts.ppl_scope)
    })
}

/// Direct scoring: the label whose verbalizer is most probable after the query.
pub fn direct_infer(
    client: &Client,
    contexts: &ContextSet,
    template: &Template,
    dataset: &Dataset,
    label_space: &[String],
    opts: &ScoringOptions,
) -> Result<Vec<Prediction>, InferenceError> {
    let builder = PromptBuilder::new(template, dataset).with_verbalizers(opts.verbalizers.as_ref());
    run_scoring(client, contexts, &builder, dataset, label_space, ScoringRule::Direct, |demos, ex| {
        builder.direct_pairs(demos, ex, label_space)
    })
}

/// Channel scoring: the label under which the input text is most probable.
/// `inverse_template` renders the label before the input.
pub fn channel_infer(
    client: &Client,
    contexts: &ContextSet,
    inverse_template: &Template,
    dataset: &Dataset,
    label_space: &[String],
    opts: &ScoringOptions,
) -> Result<Vec<Prediction>, InferenceError> {
    let builder = PromptBuilder::new(inverse_template, dataset).with_verbalizers(opts.verbalizers.as_ref());
    run_scoring(client, contexts, &builder, dataset, label_space, ScoringRule::Channel, |demos, ex| {
        builder.channel_pairs(demos, ex, label_space)
    })
}

/// Generates for each prompt, returning text cut at the first stop sequence.
fn generate_all(client: &Client, prompts: &[String], gen: &GenParams) -> Vec<Result<String, BackendError>> {
    let requests: Vec<CompletionRequest> = prompts
        .iter()
        .map(|p| CompletionRequest::generate(p.clone(), gen.max_tokens, gen.stop.clone(), gen.temperature))
        .collect();
    client
        .execute_batch(&requests)
        .into_iter()
        .map(|o| o.result.map(|c| truncate_at_stop(&c.text, &gen.stop).0.to_string()))
        .collect()
}

fn gen_prompts(
    contexts: &ContextSet,
    template: &Template,
    dataset: &Dataset,
) -> Vec<Result<String, PromptError>> {
    let builder = PromptBuilder::new(template, dataset);
    dataset
        .test
        .iter()
        .enumerate()
        .map(|(t, ex)| {
            let demos = builder.demonstrations(contexts.context_for(t))?;
            builder.gen_prompt(&demos, ex)
        })
        .collect()
}

/// Free generation after the query stem.
pub fn gen_infer(
    client: &Client,
    contexts: &ContextSet,
    template: &Template,
    dataset: &Dataset,
    gen: &GenParams,
) -> Result<Vec<Prediction>, InferenceError> {
    check_contexts(contexts, dataset)?;
    let prompts = gen_prompts(contexts, template, dataset);
    let ready: Vec<String> = prompts.iter().filter_map(|p| p.as_ref().ok()).cloned().collect();
    let mut outputs = generate_all(client, &ready, gen).into_iter();
    Ok(prompts
        .into_iter()
        .enumerate()
        .map(|(t, p)| match p {
            Err(e) => Prediction::failed(t, e),
            Ok(_) => match outputs.next().expect("one output per prompt") {
                Ok(text) => Prediction::ok(t, text.trim().to_string()),
                Err(e) => Prediction::failed(t, e),
            },
        })
        .collect())
}

struct CotState {
    trace: Vec<String>,
    error: Option<String>,
}

/// Runs stage `stage` for every still-active example, then recurses on the
/// grown prompts.
fn cot_stage(
    client: &Client,
    active: Vec<(usize, String)>,
    cot_list: &[String],
    stage: usize,
    gen: &GenParams,
    states: &mut [CotState],
) {
    let prompts: Vec<String> = active.iter().map(|(_, p)| format!("{p}{}", cot_list[stage])).collect();
    let outputs = generate_all(client, &prompts, gen);
    let mut next = Vec::new();
    for (((t, _), prompt), out) in active.into_iter().zip(prompts).zip(outputs) {
        match out {
            Ok(text) => {
                states[t].trace.push(text.clone());
                next.push((t, prompt + &text));
            }
            Err(e) => states[t].error = Some(format!("stage {stage}: {e}")),
        }
    }
    if stage + 1 < cot_list.len() && !next.is_empty() {
        cot_stage(client, next, cot_list, stage + 1, gen, states);
    }
}

/// Multi-stage generation. Stage i appends `cot_list[i]` to the previous
/// stage's prompt and generation; the last stage's output is the prediction
/// and every stage's output is kept in the trace.
pub fn cot_infer(
    client: &Client,
    contexts: &ContextSet,
    template: &Template,
    dataset: &Dataset,
    cot_list: &[String],
    gen: &GenParams,
) -> Result<Vec<Prediction>, InferenceError> {
    if cot_list.is_empty() {
        return Err(InferenceError::EmptyCotList);
    }
    check_contexts(contexts, dataset)?;
    let prompts = gen_prompts(contexts, template, dataset);
    let mut states: Vec<CotState> = prompts.iter().map(|_| CotState { trace: Vec::new(), error: None }).collect();
    let mut active = Vec::new();
    for (t, p) in prompts.into_iter().enumerate() {
        match p {
            Ok(p) => active.push((t, p)),
            Err(e) => states[t].error = Some(format!("stage 0: {e}")),
        }
    }
    if !active.is_empty() {
        cot_stage(client, active, cot_list, 0, gen, &mut states);
    }
    Ok(states
        .into_iter()
        .enumerate()
        .map(|(t, s)| match s.error {
            Some(e) => Prediction { trace: s.trace, ..Prediction::failed(t, e) },
            None => {
                let predicted = s.trace.last().map(|x| x.trim().to_string()).unwrap_or_default();
                Prediction { trace: s.trace, ..Prediction::ok(t, predicted) }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::backend::{BackendSpec, Fixture, MockBackend, ScriptedCompletion, ScriptedFailure};
    use crate::dataset::{DataFormat, DatasetSpec, Source, SplitSpec};
    use crate::template::{parse_template, TemplateSpec};

    fn ex(id: usize, q: &str, a: &str) -> Example {
        Example { id, fields: [("q".to_string(), q.to_string()), ("a".to_string(), a.to_string())].into() }
    }

    fn dataset(index: Vec<Example>, test: Vec<Example>, labels: &[&str]) -> Dataset {
        Dataset {
            spec: DatasetSpec {
                source: None,
                format: DataFormat::Jsonl,
                input_columns: vec!["q".into()],
                output_column: "a".into(),
                split: SplitSpec::Sources { index: Source::Inline(vec![]), test: Source::Inline(vec![]) },
                classification: Some(true),
            },
            index,
            test,
            label_space: Some(labels.iter().map(|s| s.to_string()).collect()),
        }
    }

    fn client(fixture: Fixture) -> Client {
        Client::new(Arc::new(MockBackend::new("mock", fixture)), &BackendSpec::default())
    }

    fn labels(l: &[&str]) -> Vec<String> {
        l.iter().map(|s| s.to_string()).collect()
    }

    fn qa_template() -> Template {
        parse_template(&TemplateSpec::single("</E></Q> => </A>\n", &[("q", "</Q>"), ("a", "</A>")], "</E>")).unwrap()
    }

    fn score(sum: f64, n: usize, rule: ScoringRule) -> CandidateScore {
        CandidateScore { logprob_sum: sum, token_count: n, normalized_score: rule.normalize(sum, n) }
    }

    #[test]
    fn decision_rules() {
        let ls = labels(&["a", "b"]);
        let m = |x: CandidateScore, y: CandidateScore| -> BTreeMap<String, CandidateScore> {
            [("a".to_string(), x), ("b".to_string(), y)].into()
        };
        let ppl = m(score(-2.0, 2, ScoringRule::Ppl), score(-2.0, 1, ScoringRule::Ppl));
        assert_eq!(ScoringRule::Ppl.decide(&ls, &ppl), Some("a"));
        let direct = m(score(-4.0, 1, ScoringRule::Direct), score(-1.0, 3, ScoringRule::Direct));
        assert_eq!(ScoringRule::Direct.decide(&ls, &direct), Some("b"));
        let tie = m(score(-1.0, 1, ScoringRule::Direct), score(-1.0, 2, ScoringRule::Direct));
        assert_eq!(ScoringRule::Direct.decide(&ls, &tie), Some("a"));
        let rev = labels(&["b", "a"]);
        assert_eq!(ScoringRule::Direct.decide(&rev, &tie), Some("b"));
    }

    #[test]
    fn ppl_prefers_lower_average_nll() {
        let ds = dataset(vec![], vec![ex(0, "q", "")], &["0", "1"]);
        let mut fx = Fixture::default();
        // Three tokens each: avg NLL 1.0 vs 2.0.
        fx.scores.insert("q => 0\n".into(), vec![Some(-1.0); 3]);
        fx.scores.insert("q => 1\n".into(), vec![Some(-2.0); 3]);
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let p = ppl_infer(&c, &ctx, &qa_template(), &ds, &labels(&["0", "1"]), &ScoringOptions::default()).unwrap();
        assert_eq!(p[0].predicted, "0");
        let s = p[0].scores.as_ref().unwrap();
        assert_eq!(s["0"].normalized_score, 1.0);
        assert_eq!(s["1"].normalized_score, 2.0);
    }

    #[test]
    fn ppl_single_label_and_ties() {
        let ds = dataset(vec![], vec![ex(0, "q", "")], &["x"]);
        let fx = Fixture { token_logprob: Some(-1.0), ..Fixture::default() };
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let p = ppl_infer(&c, &ctx, &qa_template(), &ds, &labels(&["x"]), &ScoringOptions::default()).unwrap();
        assert_eq!(p[0].predicted, "x");
        let p = ppl_infer(&c, &ctx, &qa_template(), &ds, &labels(&["y", "x"]), &ScoringOptions::default()).unwrap();
        assert_eq!(p[0].predicted, "y");
    }

    #[test]
    fn direct_scripted() {
        let ds = dataset(vec![], vec![ex(0, "film", "")], &["neg", "pos"]);
        let mut fx = Fixture::default();
        fx.scores.insert("film => Positive".into(), vec![None, None, Some(-1.0)]);
        fx.scores.insert("film => Negative".into(), vec![None, None, Some(-4.0)]);
        let verbalizers: BTreeMap<String, String> =
            [("pos".to_string(), "Positive".to_string()), ("neg".to_string(), "Negative".to_string())].into();
        let opts = ScoringOptions { verbalizers: Some(verbalizers), ..Default::default() };
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let p = direct_infer(&c, &ctx, &qa_template(), &ds, &labels(&["neg", "pos"]), &opts).unwrap();
        assert_eq!(p[0].predicted, "pos");
        assert_eq!(p[0].scores.as_ref().unwrap()["neg"].logprob_sum, -4.0);
    }

    #[test]
    fn direct_empty_verbalizer_fails_slot() {
        let ds = dataset(vec![], vec![ex(0, "film", ""), ex(1, "book", "")], &["neg", "pos"]);
        let verbalizers: BTreeMap<String, String> = [("pos".to_string(), String::new())].into();
        let opts = ScoringOptions { verbalizers: Some(verbalizers), ..Default::default() };
        let c = client(Fixture::default());
        let ctx = ContextSet::instance_level(0, vec![vec![], vec![]]);
        let p = direct_infer(&c, &ctx, &qa_template(), &ds, &labels(&["neg", "pos"]), &opts).unwrap();
        assert!(p.iter().all(Prediction::is_failed));
        assert_eq!(p[1].test_id, 1);
    }

    #[test]
    fn channel_scores_input_after_label() {
        let inv = parse_template(&TemplateSpec::single(
            "</E></A> Movie Review: </Q>\n",
            &[("q", "</Q>"), ("a", "</A>")],
            "</E>",
        ))
        .unwrap();
        let ds = dataset(vec![], vec![ex(0, "great fun", "")], &["Negative", "Positive"]);
        let mut fx = Fixture::default();
        fx.scores.insert("Positive Movie Review: great fun\n".into(), vec![None, None, None, Some(-0.5), Some(-0.5)]);
        fx.scores.insert("Negative Movie Review: great fun\n".into(), vec![None, None, None, Some(-3.0), Some(-3.0)]);
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let p = channel_infer(&c, &ctx, &inv, &ds, &labels(&["Negative", "Positive"]), &ScoringOptions::default()).unwrap();
        assert_eq!(p[0].predicted, "Positive");
        assert_eq!(p[0].scores.as_ref().unwrap()["Positive"].token_count, 2);
    }

    #[test]
    fn one_request_per_label_per_example() {
        let ds = dataset(
            vec![ex(0, "a", "0"), ex(1, "b", "1")],
            vec![ex(0, "c", ""), ex(1, "d", ""), ex(2, "e", "")],
            &["0", "1"],
        );
        let c = client(Fixture::default());
        let ctx = ContextSet::corpus_level(2, vec![1, 0]);
        let ls = labels(&["0", "1"]);
        ppl_infer(&c, &ctx, &qa_template(), &ds, &ls, &ScoringOptions::default()).unwrap();
        assert_eq!(c.stats().backend_requests, 6);
    }

    #[test]
    fn scoring_failures_stay_in_their_slot() {
        let ds = dataset(vec![], vec![ex(0, "c", ""), ex(1, "d", "")], &["0", "1"]);
        let fx = Fixture {
            failures: vec![ScriptedFailure { prompt: Some("c => 1\n".into()), statuses: vec![], always: Some(400) }],
            ..Fixture::default()
        };
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![], vec![]]);
        let p = ppl_infer(&c, &ctx, &qa_template(), &ds, &labels(&["0", "1"]), &ScoringOptions::default()).unwrap();
        assert!(p[0].is_failed());
        assert!(!p[1].is_failed());
    }

    #[test]
    fn empty_label_space() {
        let ds = dataset(vec![], vec![ex(0, "c", "")], &[]);
        let c = client(Fixture::default());
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        assert!(matches!(
            ppl_infer(&c, &ctx, &qa_template(), &ds, &[], &ScoringOptions::default()),
            Err(InferenceError::EmptyLabelSpace)
        ));
    }

    #[test]
    fn gen_truncates_and_trims() {
        let ds = dataset(vec![], vec![ex(0, "hi", "")], &[]);
        let mut fx = Fixture::default();
        fx.completions.insert("hi => ".into(), ScriptedCompletion { text: " Hello\nWorld".into(), logprobs: None });
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let gen = GenParams { stop: vec!["\n".into()], ..GenParams::default() };
        let p = gen_infer(&c, &ctx, &qa_template(), &ds, &gen).unwrap();
        assert_eq!(p[0].predicted, "Hello");
        let again = gen_infer(&c, &ctx, &qa_template(), &ds, &gen).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn cot_two_stages() {
        let tpl = parse_template(&TemplateSpec::single("</E>Q: </Q>\nA: </A>", &[("q", "</Q>"), ("a", "</A>")], "</E>")).unwrap();
        let ds = dataset(vec![], vec![ex(0, "6+7?", "")], &[]);
        let s1 = "Q: 6+7?\nA: Let's think step by step.";
        let s2 = format!("{s1}6 + 7 = 13.\nTherefore, the answer is");
        let mut fx = Fixture::default();
        fx.completions.insert(s1.into(), ScriptedCompletion { text: "6 + 7 = 13.".into(), logprobs: None });
        fx.completions.insert(s2, ScriptedCompletion { text: " 13".into(), logprobs: None });
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let cot = labels(&["Let's think step by step.", "\nTherefore, the answer is"]);
        let p = cot_infer(&c, &ctx, &tpl, &ds, &cot, &GenParams::default()).unwrap();
        assert_eq!(p[0].predicted, "13");
        assert_eq!(p[0].trace, vec!["6 + 7 = 13.".to_string(), " 13".to_string()]);
        assert_eq!(c.stats().backend_requests, 2);
    }

    #[test]
    fn cot_single_stage_matches_gen_with_suffix() {
        let tpl = parse_template(&TemplateSpec::single("</Q> </A>", &[("q", "</Q>"), ("a", "</A>")], "</E>")).unwrap();
        let ds = dataset(vec![], vec![ex(0, "x", "")], &[]);
        let c = client(Fixture::default());
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let p = cot_infer(&c, &ctx, &tpl, &ds, &labels(&["Think."]), &GenParams::default()).unwrap();
        let suffixed = parse_template(&TemplateSpec::single("</Q> Think.</A>", &[("q", "</Q>"), ("a", "</A>")], "</E>")).unwrap();
        let g = gen_infer(&c, &ctx, &suffixed, &ds, &GenParams::default()).unwrap();
        assert_eq!(p[0].predicted, g[0].predicted);
        assert_eq!(p[0].trace.len(), 1);
    }

    #[test]
    fn cot_failure_records_stage() {
        let tpl = parse_template(&TemplateSpec::single("</Q></A>", &[("q", "</Q>"), ("a", "</A>")], "</E>")).unwrap();
        let ds = dataset(vec![], vec![ex(0, "x", "")], &[]);
        let mut fx = Fixture::default();
        fx.completions.insert("x A".into(), ScriptedCompletion { text: " r".into(), logprobs: None });
        fx.failures.push(ScriptedFailure { prompt: Some("x A r B".into()), statuses: vec![], always: Some(400) });
        let c = client(fx);
        let ctx = ContextSet::instance_level(0, vec![vec![]]);
        let p = cot_infer(&c, &ctx, &tpl, &ds, &labels(&[" A", " B"]), &GenParams::default()).unwrap();
        assert!(p[0].error.as_ref().unwrap().starts_with("stage 1"));
        assert_eq!(p[0].trace, vec![" r".to_string()]);
        assert!(matches!(
            cot_infer(&c, &ctx, &tpl, &ds, &[], &GenParams::default()),
            Err(InferenceError::EmptyCotList)
        ));
    }
}
