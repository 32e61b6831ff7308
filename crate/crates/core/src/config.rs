//! Run configuration: one JSON document describing a whole pipeline run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::BackendSpec;
use crate::dataset::DatasetSpec;
use crate::evaluator::EvaluatorSpec;
use crate::inferencer::GenParams;
use crate::prompt::PplScope;
use crate::retriever::{Bm25Index, DemoOrder, MdlOptions};
use crate::template::{parse_template, Template, TemplateSpec};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("config error at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl ToString) -> Self {
        Self { path: path.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrieverKind {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "bm25")]
    Bm25,
    #[serde(rename = "topk")]
    Topk,
    #[serde(rename = "votek")]
    Votek,
    #[serde(rename = "topk+mdl")]
    TopkMdl,
}

fn default_ice_num() -> usize {
    1
}
fn default_k1() -> f64 {
    Bm25Index::DEFAULT_K1
}
fn default_b() -> f64 {
    Bm25Index::DEFAULT_B
}
fn default_graph_k() -> usize {
    10
}
fn default_discount() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    #[serde(default = "default_ice_num")]
    pub ice_num: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub order: DemoOrder,
    /// Columns whose values form the retrieval text; defaults to the input columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_columns: Option<Vec<String>>,
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    /// Defaults to `ice_num`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_k: Option<usize>,
    #[serde(default = "default_graph_k")]
    pub graph_k: usize,
    #[serde(default = "default_discount")]
    pub discount_base: f64,
    #[serde(default)]
    pub mdl: MdlOptions,
}

impl RetrieverConfig {
    pub fn new(kind: RetrieverKind, ice_num: usize) -> Self {
        Self {
            kind,
            ice_num,
            seed: 0,
            order: DemoOrder::default(),
            text_columns: None,
            k1: default_k1(),
            b: default_b(),
            select_k: None,
            graph_k: default_graph_k(),
            discount_base: default_discount(),
            mdl: MdlOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencerKind {
    Ppl,
    Direct,
    Channel,
    Gen,
    Cot,
}

impl InferencerKind {
    pub fn scores_labels(self) -> bool {
        matches!(self, InferencerKind::Ppl | InferencerKind::Direct | InferencerKind::Channel)
    }
}

fn default_max_tokens() -> usize {
    GenParams::default().max_tokens
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferencerConfig {
    pub kind: InferencerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizers: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub ppl_scope: PplScope,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_list: Option<Vec<String>>,
}

impl InferencerConfig {
    pub fn new(kind: InferencerKind) -> Self {
        Self {
            kind,
            verbalizers: None,
            ppl_scope: PplScope::default(),
            max_tokens: default_max_tokens(),
            stop: Vec::new(),
            temperature: 0.0,
            cot_list: None,
        }
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams { max_tokens: self.max_tokens, stop: self.stop.clone(), temperature: self.temperature }
    }
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub template: TemplateSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse_template: Option<TemplateSpec>,
    pub retriever: RetrieverConfig,
    pub inferencer: InferencerConfig,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Parsed templates of a validated config.
#[derive(Debug, Clone)]
pub struct Templates {
    pub main: Template,
    pub inverse: Option<Template>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(if path == "." { String::new() } else { path }, e.into_inner())
        })
    }

    /// Reads and validates a config file, returning it with the directory
    /// relative paths resolve against.
    pub fn load(path: &Path) -> Result<(RunConfig, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        let config = RunConfig::parse(&text)?;
        config.validate()?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        Ok((config, base))
    }

    /// Canonical JSON: object keys sorted, no insignificant whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Checks cross-field constraints and parses the templates.
    pub fn validate(&self) -> Result<Templates, ConfigError> {
        self.dataset.validate().map_err(|e| ConfigError::new("dataset", e))?;
        let main = parse_template(&self.template).map_err(|e| ConfigError::new("template", e))?;
        let inverse = match &self.inverse_template {
            Some(t) => Some(parse_template(t).map_err(|e| ConfigError::new("inverse_template", e))?),
            None => None,
        };
        self.backend.validate().map_err(|e| ConfigError::new("backend", e))?;

        let output = &self.dataset.output_column;
        match self.inferencer.kind {
            InferencerKind::Channel if inverse.is_none() => {
                return Err(ConfigError::new("inverse_template", "channel inference requires an inverse template"));
            }
            InferencerKind::Cot if self.inferencer.cot_list.as_ref().is_none_or(Vec::is_empty) => {
                return Err(ConfigError::new("inferencer.cot_list", "cot inference requires a non-empty cot_list"));
            }
            InferencerKind::Gen | InferencerKind::Cot if main.is_per_label() => {
                return Err(ConfigError::new("template", "generation needs a single-body template"));
            }
            InferencerKind::Direct if !main.is_per_label() && !main.has_slot(output) => {
                return Err(ConfigError::new("template", format!("direct inference needs a slot for `{output}`")));
            }
            _ => {}
        }

        let r = &self.retriever;
        if let Some(cols) = &r.text_columns {
            if cols.is_empty() {
                return Err(ConfigError::new("retriever.text_columns", "must not be empty"));
            }
        }
        if r.kind == RetrieverKind::Bm25 && (r.k1 < 0.0 || !(0.0..=1.0).contains(&r.b)) {
            return Err(ConfigError::new("retriever", "bm25 needs k1 >= 0 and b in [0, 1]"));
        }
        if r.kind == RetrieverKind::Votek && r.discount_base <= 0.0 {
            return Err(ConfigError::new("retriever.discount_base", "must be positive"));
        }
        if let EvaluatorSpec::Bleu { max_n: 0, .. } = self.evaluator {
            return Err(ConfigError::new("evaluator.max_n", "must be >= 1"));
        }
        Ok(Templates { main, inverse })
    }
}
