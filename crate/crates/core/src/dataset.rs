//! Dataset ingestion from local jsonl/csv/tsv files.
//!
//! A [`Dataset`] holds two splits: the index split (the demonstration pool)
//! and the test split. Splits come either from two separate sources or from a
//! seeded fractional partition of a single source.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing column `{0}` at line {1}")]
    MissingColumn(String, usize),
    #[error("malformed record at line {0}: {1}")]
    MalformedRecord(usize, String),
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One record of a split. `id` is the record's position within its split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub fields: BTreeMap<String, String>,
}

impl Example {
    pub fn field(&self, column: &str) -> Option<&str> {
        self.fields.get(column).map(String::as_str)
    }

    /// Copy of this example with `column` replaced by `value`.
    pub fn with_field(&self, column: &str, value: &str) -> Example {
        let mut out = self.clone();
        out.fields.insert(column.to_string(), value.to_string());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Jsonl,
    Csv,
    Tsv,
}

/// Where records come from: a file path, or records written inline in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Path(PathBuf),
    Inline(Vec<BTreeMap<String, Value>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Seeded shuffle of `source`, then prefix slices of the given fractions.
    Fraction { index: f64, test: f64, seed: u64 },
    /// Separate sources for each split.
    Sources { index: Source, test: Source },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(default)]
    pub format: DataFormat,
    pub input_columns: Vec<String>,
    pub output_column: String,
    pub split: SplitSpec,
    /// `Some(true)` forces a label space, `Some(false)` suppresses it,
    /// `None` infers it from the index split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<bool>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.input_columns.is_empty() {
            return Err(DatasetError::InvalidSpec("input_columns must not be empty".into()));
        }
        if self.input_columns.contains(&self.output_column) {
            return Err(DatasetError::InvalidSpec(format!(
                "output column `{}` is also an input column",
                self.output_column
            )));
        }
        match &self.split {
            SplitSpec::Fraction { index, test, .. } => {
                if self.source.is_none() {
                    return Err(DatasetError::InvalidSpec(
                        "fractional split requires `source`".into(),
                    ));
                }
                if !(0.0..=1.0).contains(index) || !(0.0..=1.0).contains(test) {
                    return Err(DatasetError::InvalidSpec("split fractions must lie in [0, 1]".into()));
                }
                if index + test > 1.0 + 1e-9 {
                    return Err(DatasetError::InvalidSpec(format!(
                        "split fractions sum to {} > 1",
                        index + test
                    )));
                }
            }
            SplitSpec::Sources { .. } => {
                if self.source.is_some() {
                    return Err(DatasetError::InvalidSpec(
                        "`source` is unused when splits name their own sources".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn columns(&self) -> impl Iterator<Item = &String> {
        self.input_columns.iter().chain(std::iter::once(&self.output_column))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub index: Vec<Example>,
    pub test: Vec<Example>,
    pub label_space: Option<Vec<String>>,
}

impl Dataset {
    /// Output-column values of the test split, in order.
    pub fn references(&self) -> Vec<String> {
        references(self)
    }

    pub fn output_column(&self) -> &str {
        &self.spec.output_column
    }

    /// Input-column values joined by a single space.
    pub fn input_text(&self, example: &Example) -> String {
        self.spec
            .input_columns
            .iter()
            .map(|c| example.field(c).unwrap_or(""))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn references(dataset: &Dataset) -> Vec<String> {
    let col = &dataset.spec.output_column;
    dataset
        .test
        .iter()
        .map(|e| e.fields.get(col).cloned().unwrap_or_default())
        .collect()
}

/// Loads both splits, relative paths resolved against the working directory.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    load_dataset_in(spec, Path::new(""))
}

/// Loads both splits, resolving relative paths against `base`.
pub fn load_dataset_in(spec: &DatasetSpec, base: &Path) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let (index_rows, test_rows) = match &spec.split {
        SplitSpec::Fraction { index, test, seed } => {
            let rows = read_source(spec.source.as_ref().expect("validated"), spec, base)?;
            fractional_split(rows, *index, *test, *seed)
        }
        SplitSpec::Sources { index, test } => {
            (read_source(index, spec, base)?, read_source(test, spec, base)?)
        }
    };
    if index_rows.is_empty() {
        return Err(DatasetError::EmptySplit("index".into()));
    }
    if test_rows.is_empty() {
        return Err(DatasetError::EmptySplit("test".into()));
    }
    let index = into_examples(index_rows);
    let test = into_examples(test_rows);
    let label_space = label_space(&index, &spec.output_column, spec.classification);
    Ok(Dataset {
        spec: spec.clone(),
        index,
        test,
        label_space,
    })
}

fn into_examples(rows: Vec<BTreeMap<String, String>>) -> Vec<Example> {
    rows.into_iter()
        .enumerate()
        .map(|(id, fields)| Example { id, fields })
        .collect()
}

fn label_space(index: &[Example], column: &str, forced: Option<bool>) -> Option<Vec<String>> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in index {
        *counts.entry(e.field(column).unwrap_or("")).or_default() += 1;
    }
    let classify = match forced {
        Some(f) => f,
        None => counts.values().all(|&c| c >= 2),
    };
    if !classify {
        return None;
    }
    let set: BTreeSet<&str> = counts.keys().copied().collect();
    Some(set.into_iter().map(str::to_string).collect())
}

/// Shuffles record positions with a seeded Fisher-Yates pass, slices prefixes
/// of the requested sizes, then restores file order inside each split.
fn fractional_split(
    rows: Vec<BTreeMap<String, String>>,
    index_frac: f64,
    test_frac: f64,
    seed: u64,
) -> (Vec<BTreeMap<String, String>>, Vec<BTreeMap<String, String>>) {
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_index = ((index_frac * n as f64).round() as usize).min(n);
    let n_test = ((test_frac * n as f64).round() as usize).min(n - n_index);
    let mut index_pos = order[..n_index].to_vec();
    let mut test_pos = order[n_index..n_index + n_test].to_vec();
    index_pos.sort_unstable();
    test_pos.sort_unstable();
    let mut slots: Vec<Option<BTreeMap<String, String>>> = rows.into_iter().map(Some).collect();
    let index = index_pos.iter().map(|&i| slots[i].take().expect("unique")).collect();
    let test = test_pos.iter().map(|&i| slots[i].take().expect("unique")).collect();
    (index, test)
}

fn read_source(
    source: &Source,
    spec: &DatasetSpec,
    base: &Path,
) -> Result<Vec<BTreeMap<String, String>>, DatasetError> {
    match source {
        Source::Inline(records) => records
            .iter()
            .enumerate()
            .map(|(i, rec)| record_from_json(rec, spec, i + 1))
            .collect(),
        Source::Path(p) => {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
            match spec.format {
                DataFormat::Jsonl => parse_jsonl(&text, spec),
                DataFormat::Csv => parse_delimited(&text, spec, b','),
                DataFormat::Tsv => parse_delimited(&text, spec, b'\t'),
            }
        }
    }
}

fn parse_jsonl(text: &str, spec: &DatasetSpec) -> Result<Vec<BTreeMap<String, String>>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .map_err(|e| DatasetError::MalformedRecord(line_no, e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(DatasetError::MalformedRecord(line_no, "expected a JSON object".into()));
        };
        let rec: BTreeMap<String, Value> = obj.into_iter().collect();
        out.push(record_from_json(&rec, spec, line_no)?);
    }
    Ok(out)
}

fn record_from_json(
    rec: &BTreeMap<String, Value>,
    spec: &DatasetSpec,
    line: usize,
) -> Result<BTreeMap<String, String>, DatasetError> {
    let mut fields = BTreeMap::new();
    for col in spec.columns() {
        let text = match rec.get(col) {
            None | Some(Value::Null) => {
                return Err(DatasetError::MissingColumn(col.clone(), line));
            }
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::Bool(b)) => b.to_string(),
            Some(_) => {
                return Err(DatasetError::MalformedRecord(
                    line,
                    format!("column `{col}` is not a scalar"),
                ))
            }
        };
        fields.insert(col.clone(), text);
    }
    Ok(fields)
}

fn parse_delimited(
    text: &str,
    spec: &DatasetSpec,
    delimiter: u8,
) -> Result<Vec<BTreeMap<String, String>>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .quoting(delimiter == b',')
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::MalformedRecord(1, e.to_string()))?
        .clone();
    let mut positions = Vec::new();
    for col in spec.columns() {
        let pos = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| DatasetError::MissingColumn(col.clone(), 1))?;
        positions.push((col.clone(), pos));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(i + 2);
            DatasetError::MalformedRecord(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let mut fields = BTreeMap::new();
        for (col, pos) in &positions {
            let v = row
                .get(*pos)
                .ok_or_else(|| DatasetError::MissingColumn(col.clone(), line))?;
            fields.insert(col.clone(), v.to_string());
        }
        out.push(fields);
    }
    Ok(out)
}

/// Writes examples as jsonl, one object of their fields per line.
pub fn write_jsonl(examples: &[Example], path: &Path) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut file, &e.fields)?;
        file.write_all(b"\n")?;
    }
    file.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_for(source: Source, format: DataFormat, split: SplitSpec) -> DatasetSpec {
        DatasetSpec {
            source: Some(source),
            format,
            input_columns: vec!["text".into()],
            output_column: "label".into(),
            split,
            classification: None,
        }
    }

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_records_half_split() {
        let f = write_tmp("{\"text\":\"a\",\"label\":0}\n{\"text\":\"b\",\"label\":1}\n", ".jsonl");
        let spec = spec_for(
            Source::Path(f.path().into()),
            DataFormat::Jsonl,
            SplitSpec::Fraction { index: 0.5, test: 0.5, seed: 7 },
        );
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.index.len(), 1);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.index[0].id, 0);
        assert_eq!(ds.test[0].id, 0);
        assert_ne!(ds.index[0].fields, ds.test[0].fields);
    }

    #[test]
    fn missing_column_reports_first_line() {
        let f = write_tmp("{\"text\":\"a\",\"label\":0}\n", ".jsonl");
        let mut spec = spec_for(
            Source::Path(f.path().into()),
            DataFormat::Jsonl,
            SplitSpec::Fraction { index: 0.5, test: 0.5, seed: 7 },
        );
        spec.output_column = "sentiment".into();
        match load_dataset(&spec) {
            Err(DatasetError::MissingColumn(c, 1)) => assert_eq!(c, "sentiment"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_csv_header_is_line_one() {
        let f = write_tmp("text,label\nhi,1\n", ".csv");
        let mut spec = spec_for(
            Source::Path(f.path().into()),
            DataFormat::Csv,
            SplitSpec::Fraction { index: 0.5, test: 0.5, seed: 7 },
        );
        spec.input_columns = vec!["sentence".into()];
        assert!(matches!(load_dataset(&spec), Err(DatasetError::MissingColumn(c, 1)) if c == "sentence"));
    }

    #[test]
    fn sst2_shaped_labels() {
        let mut lines = String::new();
        for (t, l) in [("good", 0), ("great", 0), ("bad", 1), ("awful", 1), ("fine", 0), ("meh", 1)] {
            lines.push_str(&format!("{{\"text\":\"{t}\",\"label\":{l}}}\n"));
        }
        let idx = write_tmp(&lines, ".jsonl");
        let test = write_tmp("{\"text\":\"ok\",\"label\":1}\n", ".jsonl");
        let spec = DatasetSpec {
            source: None,
            format: DataFormat::Jsonl,
            input_columns: vec!["text".into()],
            output_column: "label".into(),
            split: SplitSpec::Sources {
                index: Source::Path(idx.path().into()),
                test: Source::Path(test.path().into()),
            },
            classification: None,
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.label_space, Some(vec!["0".to_string(), "1".to_string()]));
        assert_eq!(ds.references(), vec!["1"]);
    }

    #[test]
    fn singleton_labels_are_not_classification_unless_forced() {
        let recs: Vec<BTreeMap<String, Value>> = (0..4)
            .map(|i| {
                BTreeMap::from([
                    ("text".to_string(), Value::from(format!("t{i}"))),
                    ("label".to_string(), Value::from(format!("l{i}"))),
                ])
            })
            .collect();
        let mut spec = spec_for(
            Source::Inline(recs),
            DataFormat::Jsonl,
            SplitSpec::Fraction { index: 0.5, test: 0.5, seed: 1 },
        );
        assert_eq!(load_dataset(&spec).unwrap().label_space, None);
        spec.classification = Some(true);
        assert_eq!(load_dataset(&spec).unwrap().label_space.unwrap().len(), 2);
    }

    #[test]
    fn wmt_shaped_references() {
        let f = write_tmp(
            "de\ten\nHallo\tHello\nWelt\tWorld\nJa\tYes\n",
            ".tsv",
        );
        let spec = DatasetSpec {
            source: None,
            format: DataFormat::Tsv,
            input_columns: vec!["de".into()],
            output_column: "en".into(),
            split: SplitSpec::Sources {
                index: Source::Path(f.path().into()),
                test: Source::Path(f.path().into()),
            },
            classification: Some(false),
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.references(), vec!["Hello", "World", "Yes"]);
    }

    #[test]
    fn csv_quoting() {
        let f = write_tmp("text,label\n\"a, \"\"quoted\"\" cell\",1\nplain,0\n", ".csv");
        let spec = spec_for(
            Source::Path(f.path().into()),
            DataFormat::Csv,
            SplitSpec::Fraction { index: 0.5, test: 0.5, seed: 3 },
        );
        let ds = load_dataset(&spec).unwrap();
        let all: Vec<_> = ds.index.iter().chain(&ds.test).map(|e| e.fields["text"].clone()).collect();
        assert!(all.contains(&"a, \"quoted\" cell".to_string()));
    }

    #[test]
    fn malformed_jsonl_line() {
        let f = write_tmp("{\"text\":\"a\",\"label\":0}\n{not json\n", ".jsonl");
        let spec = spec_for(
            Source::Path(f.path().into()),
            DataFormat::Jsonl,
            SplitSpec::Fraction { index: 0.5, test: 0.5, seed: 7 },
        );
        assert!(matches!(load_dataset(&spec), Err(DatasetError::MalformedRecord(2, _))));
    }

    #[test]
    fn empty_split() {
        let f = write_tmp("{\"text\":\"a\",\"label\":0}\n{\"text\":\"b\",\"label\":1}\n", ".jsonl");
        let spec = spec_for(
            Source::Path(f.path().into()),
            DataFormat::Jsonl,
            SplitSpec::Fraction { index: 1.0, test: 0.0, seed: 7 },
        );
        assert!(matches!(load_dataset(&spec), Err(DatasetError::EmptySplit(s)) if s == "test"));
    }

    #[test]
    fn overlapping_columns_rejected() {
        let mut spec = spec_for(
            Source::Inline(vec![]),
            DataFormat::Jsonl,
            SplitSpec::Fraction { index: 0.5, test: 0.5, seed: 7 },
        );
        spec.input_columns.push("label".into());
        assert!(matches!(spec.validate(), Err(DatasetError::InvalidSpec(_))));
    }
}
