//! Prompt-template mini-language.
//!
//! A template body is plain text containing placeholder tokens: one token per
//! dataset column, plus one in-context-examples token marking where retrieved
//! demonstrations go. Bodies are either a single string or one string per
//! label value. Placeholder tokens are matched verbatim; there is no escaping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Example;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("placeholder tokens `{0}` and `{1}` overlap")]
    OverlappingTokens(String, String),
    #[error("placeholder token for `{0}` is empty")]
    EmptyToken(String),
    #[error("in-context token appears more than once in body `{0}`")]
    DuplicateIceToken(String),
    #[error("body references unregistered placeholder `{0}`")]
    UnknownColumnInBody(String),
    #[error("no template variant for label `{0}`")]
    MissingLabelVariant(String),
    #[error("example has no field `{0}`")]
    MissingField(String),
}

fn default_separator() -> String {
    "\n".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemplateBody {
    Single(String),
    PerLabel(BTreeMap<String, String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub body: TemplateBody,
    /// Column name to placeholder token.
    pub column_tokens: BTreeMap<String, String>,
    pub ice_token: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    /// Reject bodies containing angle-bracket tokens that are not registered.
    #[serde(default)]
    pub strict: bool,
}

impl TemplateSpec {
    pub fn single(body: &str, tokens: &[(&str, &str)], ice_token: &str) -> Self {
        Self {
            body: TemplateBody::Single(body.to_string()),
            column_tokens: tokens.iter().map(|(c, t)| (c.to_string(), t.to_string())).collect(),
            ice_token: ice_token.to_string(),
            separator: default_separator(),
            strict: false,
        }
    }

    pub fn per_label(bodies: &[(&str, &str)], tokens: &[(&str, &str)], ice_token: &str) -> Self {
        Self {
            body: TemplateBody::PerLabel(
                bodies.iter().map(|(l, b)| (l.to_string(), b.to_string())).collect(),
            ),
            ..Self::single("", tokens, ice_token)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Column(String),
    Ice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Bodies {
    Single(Vec<Segment>),
    PerLabel(BTreeMap<String, Vec<Segment>>),
}

/// A rendered query with the position where demonstrations are spliced in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryStem {
    pub text: String,
    /// Byte offset of the in-context slot, if the body has one.
    pub ice_offset: Option<usize>,
}

/// Parsed template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    bodies: Bodies,
    column_tokens: BTreeMap<String, String>,
    ice_token: String,
    separator: String,
}

pub fn parse_template(spec: &TemplateSpec) -> Result<Template, TemplateError> {
    Template::parse(spec)
}

impl Template {
    pub fn parse(spec: &TemplateSpec) -> Result<Template, TemplateError> {
        let mut tokens: Vec<(Option<&str>, &str)> =
            spec.column_tokens.iter().map(|(c, t)| (Some(c.as_str()), t.as_str())).collect();
        tokens.push((None, spec.ice_token.as_str()));
        for (col, tok) in &tokens {
            if tok.is_empty() {
                return Err(TemplateError::EmptyToken(col.unwrap_or("<ice>").to_string()));
            }
        }
        for (i, (_, a)) in tokens.iter().enumerate() {
            for (_, b) in &tokens[i + 1..] {
                if a.contains(b) || b.contains(a) {
                    return Err(TemplateError::OverlappingTokens(a.to_string(), b.to_string()));
                }
            }
        }
        let parse_one = |body: &str| -> Result<Vec<Segment>, TemplateError> {
            let segs = scan(body, &tokens);
            if segs.iter().filter(|s| matches!(s, Segment::Ice)).count() > 1 {
                return Err(TemplateError::DuplicateIceToken(body.to_string()));
            }
            if spec.strict {
                for s in &segs {
                    if let Segment::Literal(text) = s {
                        if let Some(tok) = find_angle_token(text) {
                            return Err(TemplateError::UnknownColumnInBody(tok));
                        }
                    }
                }
            }
            Ok(segs)
        };
        let bodies = match &spec.body {
            TemplateBody::Single(b) => Bodies::Single(parse_one(b)?),
            TemplateBody::PerLabel(map) => Bodies::PerLabel(
                map.iter()
                    .map(|(label, b)| Ok((label.clone(), parse_one(b)?)))
                    .collect::<Result<_, TemplateError>>()?,
            ),
        };
        Ok(Template {
            bodies,
            column_tokens: spec.column_tokens.clone(),
            ice_token: spec.ice_token.clone(),
            separator: spec.separator.clone(),
        })
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn is_per_label(&self) -> bool {
        matches!(self.bodies, Bodies::PerLabel(_))
    }

    /// Labels with their own body, in sorted order. Empty for single-body templates.
    pub fn labels(&self) -> Vec<&str> {
        match &self.bodies {
            Bodies::Single(_) => Vec::new(),
            Bodies::PerLabel(m) => m.keys().map(String::as_str).collect(),
        }
    }

    /// Whether every body has a slot for `column`.
    pub fn has_slot(&self, column: &str) -> bool {
        let has = |segs: &Vec<Segment>| segs.iter().any(|s| matches!(s, Segment::Column(c) if c == column));
        match &self.bodies {
            Bodies::Single(s) => has(s),
            Bodies::PerLabel(m) => m.values().all(has),
        }
    }

    /// Segments of the body selected by `label`. Single-body templates ignore it.
    pub fn segments(&self, label: Option<&str>) -> Result<&[Segment], TemplateError> {
        match &self.bodies {
            Bodies::Single(s) => Ok(s),
            Bodies::PerLabel(m) => {
                let label = label.unwrap_or_default();
                m.get(label)
                    .map(Vec::as_slice)
                    .ok_or_else(|| TemplateError::MissingLabelVariant(label.to_string()))
            }
        }
    }

    /// Re-serializes a body with slots replaced by their tokens.
    pub fn to_source(&self, label: Option<&str>) -> Result<String, TemplateError> {
        let mut out = String::new();
        for seg in self.segments(label)? {
            match seg {
                Segment::Literal(t) => out.push_str(t),
                Segment::Column(c) => out.push_str(&self.column_tokens[c]),
                Segment::Ice => out.push_str(&self.ice_token),
            }
        }
        Ok(out)
    }

    /// Renders a solved example: every column slot filled, the in-context slot dropped.
    pub fn render_demonstration(
        &self,
        example: &Example,
        label: Option<&str>,
    ) -> Result<String, TemplateError> {
        Ok(self.render_until(example, label, None)?.text)
    }

    /// Renders the query stem: everything before the first `output_column`
    /// slot. Bodies without that slot render in full.
    pub fn render_query(
        &self,
        example: &Example,
        label: Option<&str>,
        output_column: &str,
    ) -> Result<QueryStem, TemplateError> {
        self.render_until(example, label, Some(output_column))
    }

    /// Renders the whole body, keeping the in-context slot position.
    pub fn render_full(&self, example: &Example, label: Option<&str>) -> Result<QueryStem, TemplateError> {
        self.render_until(example, label, None)
    }

    /// Renders up to (not including) the first slot of `stop_column`.
    pub fn render_until(
        &self,
        example: &Example,
        label: Option<&str>,
        stop_column: Option<&str>,
    ) -> Result<QueryStem, TemplateError> {
        let mut text = String::new();
        let mut ice_offset = None;
        for seg in self.segments(label)? {
            match seg {
                Segment::Literal(t) => text.push_str(t),
                Segment::Column(c) => {
                    if Some(c.as_str()) == stop_column {
                        break;
                    }
                    let value = example
                        .field(c)
                        .ok_or_else(|| TemplateError::MissingField(c.clone()))?;
                    text.push_str(value);
                }
                Segment::Ice => ice_offset = Some(text.len()),
            }
        }
        Ok(QueryStem { text, ice_offset })
    }

    /// Splices demonstrations into the stem.
    pub fn assemble_prompt(&self, demonstrations: &[String], stem: &QueryStem) -> String {
        assemble_prompt(demonstrations, stem, &self.separator)
    }
}

/// Joins demonstrations with `separator` and places them at the stem's
/// in-context slot, or in front of the stem followed by `separator` when the
/// body has no slot. No demonstrations yields the stem unchanged.
pub fn assemble_prompt(demonstrations: &[String], stem: &QueryStem, separator: &str) -> String {
    if demonstrations.is_empty() {
        return stem.text.clone();
    }
    let block = demonstrations.join(separator);
    match stem.ice_offset {
        Some(at) => {
            let mut out = String::with_capacity(block.len() + stem.text.len());
            out.push_str(&stem.text[..at]);
            out.push_str(&block);
            out.push_str(&stem.text[at..]);
            out
        }
        None => format!("{block}{separator}{}", stem.text),
    }
}

fn scan(body: &str, tokens: &[(Option<&str>, &str)]) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut rest = body;
    loop {
        let next = tokens
            .iter()
            .filter_map(|(col, tok)| rest.find(tok).map(|at| (at, *col, *tok)))
            .min_by_key(|(at, _, _)| *at);
        let Some((at, col, tok)) = next else {
            if !rest.is_empty() {
                segs.push(Segment::Literal(rest.to_string()));
            }
            return segs;
        };
        if at > 0 {
            segs.push(Segment::Literal(rest[..at].to_string()));
        }
        segs.push(match col {
            Some(c) => Segment::Column(c.to_string()),
            None => Segment::Ice,
        });
        rest = &rest[at + tok.len()..];
    }
}

/// First `<name>` or `</name>` shaped substring, if any.
fn find_angle_token(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while let Some(off) = text[i..].find('<') {
        let start = i + off;
        let mut j = start + 1;
        if bytes.get(j) == Some(&b'/') {
            j += 1;
        }
        let name_start = j;
        while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
            j += 1;
        }
        if j > name_start && bytes.get(j) == Some(&b'>') {
            return Some(text[start..=j].to_string());
        }
        i = start + 1;
    }
    None
}
