//! Sequence and feature-table ingestion, preprocessing and evaluation metrics.

mod features;
mod metrics;
mod preprocess;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{extract_basic_features, sequence_features, FEATURE_NAMES};
pub use metrics::{balanced_accuracy, best_at_k};
pub use preprocess::{preprocess, ColumnTransform, OutputColumn, Preprocessor, DEFAULT_CATEGORICAL_MAX_UNIQUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Layout of a sequence file: one sample per line, label first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceFormat {
    /// Tab- or space-separated (UCR `.tsv`).
    TsvLabelFirst,
    /// Comma-separated.
    Delimited,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<Vec<f64>>,
    /// Canonical label tokens, one per sequence.
    pub labels: Vec<String>,
    pub split: Split,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Integral numeric labels are canonicalised so that `1`, `1.0` and
/// `1.0000000e+00` name the same class.
fn canonical_label(token: &str) -> Option<String> {
    let v: f64 = token.parse().ok()?;
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        Some(format!("{}", v as i64))
    } else {
        None
    }
}

pub fn parse_sequences(text: &str, format: SequenceFormat, split: Split) -> Result<SequenceDataset> {
    let mut sequences = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let mut tokens: Vec<&str> = match format {
            SequenceFormat::TsvLabelFirst => raw.split_whitespace().collect(),
            SequenceFormat::Delimited => raw.split(',').map(str::trim).collect(),
        };
        let label_tok = tokens.remove(0);
        let label = canonical_label(label_tok).ok_or_else(|| Error::Label {
            line,
            token: label_tok.to_string(),
        })?;
        let values = tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format {
                        line,
                        message: format!("non-numeric value {t:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Format {
                line,
                message: "no values after the label".into(),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Format {
                    line,
                    message: format!("expected {w} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        sequences.push(values);
        labels.push(label);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(SequenceDataset {
        sequences,
        labels,
        split,
    })
}

pub fn load_sequences(path: &Path, format: SequenceFormat, split: Split) -> Result<SequenceDataset> {
    parse_sequences(&fs::read_to_string(path)?, format, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    /// Indicator for `source == level`.
    OneHot { source: String, level: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Already clipped and min-max scaled into [0,1].
    pub scaled: bool,
}

impl Column {
    pub fn raw(name: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Continuous,
            scaled: false,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, ColumnKind::Continuous)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

/// Numeric names sort numerically, anything else lexicographically.
fn sorted_class_names<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = names.collect();
    let mut v: Vec<String> = set.into_iter().map(String::from).collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    }
    v
}

impl FeatureMatrix {
    pub fn from_label_names(
        columns: Vec<Column>,
        rows: Vec<Vec<f64>>,
        label_names: &[String],
    ) -> Self {
        let class_names = sorted_class_names(label_names.iter().map(String::as_str));
        let labels = label_names
            .iter()
            .map(|l| class_names.iter().position(|c| c == l).unwrap())
            .collect();
        FeatureMatrix {
            columns,
            rows,
            labels,
            class_names,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Indices of columns holding at least one NaN.
    pub fn nan_columns(&self) -> Vec<usize> {
        (0..self.num_columns())
            .filter(|&j| self.rows.iter().any(|r| r[j].is_nan()))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Re-expresses labels against `class_names`; fails if a label is absent.
    pub fn align_classes(&mut self, class_names: &[String]) -> Result<()> {
        let map = self
            .class_names
            .iter()
            .map(|c| {
                class_names.iter().position(|t| t == c).ok_or_else(|| {
                    Error::Schema(format!("class {c:?} does not occur in the training data"))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        self.labels.iter_mut().for_each(|l| *l = map[*l]);
        self.class_names = class_names.to_vec();
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels
            .iter()
            .map(|&l| self.class_names[l].clone())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        header.push("label");
        w.write_record(&header)?;
        for (row, &label) in self.rows.iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            rec.push(self.class_names[label].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    t.parse().ok()
}

/// Reads a header-first CSV with a mandatory `label` column. Empty and
/// `NaN` cells load as NaN for the preprocessing pass to deal with.
pub fn read_feature_csv<R: std::io::Read>(input: R) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::Schema(format!("duplicate column name {h:?}")));
        }
    }
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Schema("missing \"label\" column".into()))?;
    let columns: Vec<Column> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_col)
        .map(|(_, h)| Column::raw(h.clone()))
        .collect();
    let mut rows = Vec::new();
    let mut label_names = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(columns.len());
        for (j, cell) in rec.iter().enumerate() {
            if j == label_col {
                let t = cell.trim();
                label_names.push(canonical_label(t).unwrap_or_else(|| t.to_string()));
            } else {
                row.push(parse_cell(cell).ok_or_else(|| Error::Cell {
                    row: i + 1,
                    column: header[j].clone(),
                    value: cell.to_string(),
                })?);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(FeatureMatrix::from_label_names(columns, rows, &label_names))
}

pub fn load_feature_csv(path: &Path) -> Result<FeatureMatrix> {
    read_feature_csv(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_sequences() {
        let ds = parse_sequences(
            "1\t0.1\t0.2\t0.3\t0.4\n2\t1 2 3 4\n1.0000000e+00 4 3 2 1\n",
            SequenceFormat::TsvLabelFirst,
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.sequences.iter().all(|s| s.len() == 4));
        assert_eq!(ds.labels, vec!["1", "2", "1"]);
    }

    #[test]
    fn ragged_rows_name_the_line() {
        let err = parse_sequences("1,1,2,3\n2,1,2\n", SequenceFormat::Delimited, Split::Train)
            .unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_and_bad_tokens() {
        assert!(matches!(
            parse_sequences("\n\n", SequenceFormat::Delimited, Split::Test),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            parse_sequences("cat 1 2 3\n", SequenceFormat::TsvLabelFirst, Split::Test),
            Err(Error::Label { line: 1, .. })
        ));
        assert!(matches!(
            parse_sequences("1 1 x 3\n", SequenceFormat::TsvLabelFirst, Split::Test),
            Err(Error::Format { line: 1, .. })
        ));
    }

    #[test]
    fn feature_csv_shapes_and_errors() {
        let mut text = (0..22).map(|i| format!("f{i}")).collect::<Vec<_>>().join(",");
        text.push_str(",label\n");
        for r in 0..3 {
            let row: Vec<String> = (0..22).map(|i| format!("{}", i * r)).collect();
            text.push_str(&format!("{},{}\n", row.join(","), r % 2));
        }
        let m = read_feature_csv(text.as_bytes()).unwrap();
        assert_eq!(m.num_columns(), 22);
        assert_eq!(m.num_rows(), 3);
        assert_eq!(m.class_names, vec!["0", "1"]);

        let m = read_feature_csv("a,b,label\n1,NaN,0\n2,,1\n".as_bytes()).unwrap();
        assert_eq!(m.nan_columns(), vec![1]);

        assert!(matches!(
            read_feature_csv("a,a,label\n1,2,0\n".as_bytes()),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            read_feature_csv("a,b\n1,2\n".as_bytes()),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            read_feature_csv("a,label\nfoo,1\n".as_bytes()),
            Err(Error::Cell { row: 1, .. })
        ));
    }

    #[test]
    fn class_names_sort_numerically() {
        let names: Vec<String> = ["10", "2", "1"].iter().map(|s| s.to_string()).collect();
        let m = FeatureMatrix::from_label_names(vec![], vec![vec![]; 3], &names);
        assert_eq!(m.class_names, vec!["1", "2", "10"]);
        assert_eq!(m.labels, vec![2, 1, 0]);
    }

    #[test]
    fn csv_round_trip() {
        let m = read_feature_csv("a,b,label\n0.25,1e-3,x\n0.5,2,y\n".as_bytes()).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(read_feature_csv(buf.as_slice()).unwrap(), m);
    }
}
