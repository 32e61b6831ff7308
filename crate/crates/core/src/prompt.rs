//! Prompt construction shared by the scoring strategies and MDL reranking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::template::{assemble_prompt, QueryStem, Segment, Template, TemplateError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PromptError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("template has no slot for output column '{0}'")]
    NoAnswerSlot(String),
    #[error("template body has no input-column slot")]
    NoInputSlot,
    #[error("empty continuation for label '{0}'")]
    EmptyContinuation(String),
}

/// Which part of a candidate sequence perplexity is measured over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PplScope {
    /// Demonstrations, query and answer.
    #[default]
    Full,
    /// Only the query and its candidate answer; demonstrations are conditioning.
    QueryAndAnswer,
}

/// A scoring request: `prompt` conditions, `continuation` is scored.
pub type ScoredPair = (String, String);

pub struct PromptBuilder<'a> {
    template: &'a Template,
    dataset: &'a Dataset,
    verbalizers: Option<&'a BTreeMap<String, String>>,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(template: &'a Template, dataset: &'a Dataset) -> Self {
        Self { template, dataset, verbalizers: None }
    }

    /// Maps labels to the surface text placed in the output slot.
    pub fn with_verbalizers(mut self, verbalizers: Option<&'a BTreeMap<String, String>>) -> Self {
        self.verbalizers = verbalizers;
        self
    }

    pub fn template(&self) -> &Template {
        self.template
    }

    pub fn verbalize<'s>(&'s self, label: &'s str) -> &'s str {
        self.verbalizers.and_then(|v| v.get(label)).map_or(label, String::as_str)
    }

    fn output_column(&self) -> &str {
        self.dataset.output_column()
    }

    fn labeled(&self, example: &Example, label: &str) -> Example {
        example.with_field(self.output_column(), self.verbalize(label))
    }

    /// Renders the index examples `ids` as solved demonstrations, in order.
    pub fn demonstrations(&self, ids: &[usize]) -> Result<Vec<String>, PromptError> {
        ids.iter()
            .map(|&id| {
                let ex = &self.dataset.index[id];
                let gold = ex
                    .field(self.output_column())
                    .ok_or_else(|| TemplateError::MissingField(self.output_column().to_string()))?;
                Ok(self.template.render_demonstration(&self.labeled(ex, gold), Some(gold))?)
            })
            .collect()
    }

    /// Prompt for free-form generation: demonstrations plus the query stem.
    pub fn gen_prompt(&self, demos: &[String], example: &Example) -> Result<String, PromptError> {
        let stem = self.template.render_query(example, None, self.output_column())?;
        Ok(self.template.assemble_prompt(demos, &stem))
    }

    /// Byte offset in the assembled prompt where the query's own text starts.
    fn query_start(&self, demos: &[String], stem: &QueryStem) -> usize {
        if demos.is_empty() {
            return stem.ice_offset.unwrap_or(0);
        }
        let sep = self.template.separator();
        let block: usize = demos.iter().map(String::len).sum::<usize>() + sep.len() * (demos.len() - 1);
        match stem.ice_offset {
            Some(at) => at + block,
            None => block + sep.len(),
        }
    }

    fn full(&self, example: &Example, label: &str) -> Result<QueryStem, PromptError> {
        let body_label = self.template.is_per_label().then_some(label);
        if !self.template.is_per_label() && !self.template.has_slot(self.output_column()) {
            return Err(PromptError::NoAnswerSlot(self.output_column().to_string()));
        }
        Ok(self.template.render_full(&self.labeled(example, label), body_label)?)
    }

    /// Candidate sequences for perplexity scoring, one per label.
    pub fn ppl_pairs(
        &self,
        demos: &[String],
        example: &Example,
        labels: &[String],
        scope: PplScope,
    ) -> Result<Vec<ScoredPair>, PromptError> {
        labels
            .iter()
            .map(|y| {
                let stem = self.full(example, y)?;
                let text = self.template.assemble_prompt(demos, &stem);
                let cut = match scope {
                    PplScope::Full => 0,
                    PplScope::QueryAndAnswer => self.query_start(demos, &stem),
                };
                Ok((text[..cut].to_string(), text[cut..].to_string()))
            })
            .collect()
    }

    /// Prompt/continuation pairs for scoring each label as the answer.
    ///
    /// Single-body templates score the verbalized label after the query
    /// stem. Per-label bodies score whatever follows the text all candidate
    /// renderings share.
    pub fn direct_pairs(
        &self,
        demos: &[String],
        example: &Example,
        labels: &[String],
    ) -> Result<Vec<ScoredPair>, PromptError> {
        if !self.template.is_per_label() {
            if !self.template.has_slot(self.output_column()) {
                return Err(PromptError::NoAnswerSlot(self.output_column().to_string()));
            }
            let stem = self.template.render_query(example, None, self.output_column())?;
            let prompt = self.template.assemble_prompt(demos, &stem);
            return labels
                .iter()
                .map(|y| {
                    let cont = self.verbalize(y);
                    if cont.is_empty() {
                        return Err(PromptError::EmptyContinuation(y.clone()));
                    }
                    Ok((prompt.clone(), cont.to_string()))
                })
                .collect();
        }

        let mut texts = Vec::with_capacity(labels.len());
        let mut cut = usize::MAX;
        for y in labels {
            let stem = self.full(example, y)?;
            let text = self.template.assemble_prompt(demos, &stem);
            if labels.len() == 1 {
                cut = self.query_start(demos, &stem);
            }
            texts.push(text);
        }
        if labels.len() > 1 {
            cut = common_prefix_len(&texts);
        }
        labels
            .iter()
            .zip(texts)
            .map(|(y, text)| {
                let cut = cut.min(text.len());
                if cut == text.len() {
                    return Err(PromptError::EmptyContinuation(y.clone()));
                }
                Ok((text[..cut].to_string(), text[cut..].to_string()))
            })
            .collect()
    }

    /// Pairs for channel scoring: the label-first rendering conditions, the
    /// input text is scored. Call on a builder holding the inverse template.
    pub fn channel_pairs(
        &self,
        demos: &[String],
        example: &Example,
        labels: &[String],
    ) -> Result<Vec<ScoredPair>, PromptError> {
        labels
            .iter()
            .map(|y| {
                let body_label = self.template.is_per_label().then_some(y.as_str());
                let first_input = self
                    .template
                    .segments(body_label)?
                    .iter()
                    .find_map(|s| match s {
                        Segment::Column(c) if self.dataset.spec.input_columns.contains(c) => Some(c.clone()),
                        _ => None,
                    })
                    .ok_or(PromptError::NoInputSlot)?;
                let ex = self.labeled(example, y);
                let stem = self.template.render_until(&ex, body_label, Some(&first_input))?;
                let full = self.template.render_full(&ex, body_label)?;
                let cont = full.text[stem.text.len()..].to_string();
                if cont.is_empty() {
                    return Err(PromptError::EmptyContinuation(y.clone()));
                }
                Ok((assemble_prompt(demos, &stem, self.template.separator()), cont))
            })
            .collect()
    }
}

/// Length in bytes of the longest common prefix, on a char boundary.
fn common_prefix_len(texts: &[String]) -> usize {
    let Some(first) = texts.first() else { return 0 };
    let mut len = first.len();
    for t in &texts[1..] {
        len = first
            .char_indices()
            .zip(t.chars())
            .take_while(|((_, a), b)| a == b)
            .last()
            .map_or(0, |((i, a), _)| i + a.len_utf8())
            .min(len);
    }
    len
}
