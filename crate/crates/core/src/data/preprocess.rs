//! Column cleaning, categorical encoding and outlier-robust scaling.
//!
//! Statistics are fitted on the training split only and replayed on any
//! other split through [`Preprocessor::transform`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Column, ColumnKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::layers::quantile_sorted;

pub const DEFAULT_CATEGORICAL_MAX_UNIQUE: usize = 10;

/// Lower and upper clipping percentiles for continuous columns.
pub const CLIP_QUANTILES: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnTransform {
    /// Already in [0,1]; clamped only.
    Passthrough,
    Scale {
        clip_lo: f64,
        clip_hi: f64,
        min: f64,
        max: f64,
    },
    OneHot {
        level: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputColumn {
    /// Index of the source column in the raw schema.
    pub source: usize,
    pub column: Column,
    pub transform: ColumnTransform,
}

/// Fitted preprocessing: maps a matrix with the raw training schema to the
/// cleaned, encoded and scaled feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub input_columns: Vec<String>,
    pub outputs: Vec<OutputColumn>,
    pub class_names: Vec<String>,
}

impl ColumnTransform {
    fn apply(&self, v: f64) -> f64 {
        match *self {
            ColumnTransform::Passthrough => v.clamp(0.0, 1.0),
            ColumnTransform::Scale {
                clip_lo,
                clip_hi,
                min,
                max,
            } => ((v.clamp(clip_lo, clip_hi) - min) / (max - min)).clamp(0.0, 1.0),
            ColumnTransform::OneHot { level } => f64::from(u8::from(v == level)),
        }
    }
}

impl Preprocessor {
    pub fn transform(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        let names: Vec<&str> = m.columns.iter().map(|c| c.name.as_str()).collect();
        if names != self.input_columns.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Schema(format!(
                "column names {names:?} do not match the training schema {:?}",
                self.input_columns
            )));
        }
        let mut out = m.clone();
        out.align_classes(&self.class_names)?;
        out.columns = self.outputs.iter().map(|o| o.column.clone()).collect();
        out.rows = m
            .rows
            .iter()
            .map(|r| self.outputs.iter().map(|o| o.transform.apply(r[o.source])).collect())
            .collect();
        Ok(out)
    }
}

fn row_key(row: &[f64], label: usize) -> Vec<u64> {
    let mut k: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
    k.push(label as u64);
    k
}

/// First occurrence of each distinct (features, label) row.
fn unique_rows(m: &FeatureMatrix, cols: &[usize]) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..m.num_rows())
        .filter(|&i| {
            let vals: Vec<f64> = cols.iter().map(|&j| m.rows[i][j]).collect();
            seen.insert(row_key(&vals, m.labels[i]))
        })
        .collect()
}

fn is_constant(m: &FeatureMatrix, rows: &[usize], j: usize) -> bool {
    rows.windows(2).all(|w| m.rows[w[0]][j] == m.rows[w[1]][j])
}

/// Fits on `train` and transforms both splits:
///
/// 1. drop columns with a NaN in either split;
/// 2. drop duplicate training rows, then training-constant columns;
/// 3. turn raw columns with at most `categorical_max_unique` distinct
///    training values into one-hot groups;
/// 4. clip remaining raw columns to the training 1st/99th percentiles and
///    min-max scale them with training statistics.
///
/// Test values are clamped into [0,1]. A final pass removes any duplicate
/// rows or constant columns that clipping introduced into the training
/// split.
pub fn preprocess(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    categorical_max_unique: usize,
) -> Result<(FeatureMatrix, FeatureMatrix, Preprocessor)> {
    if train.columns != test.columns {
        return Err(Error::Schema(
            "training and test splits have different columns".into(),
        ));
    }
    if train.num_rows() == 0 {
        return Err(Error::EmptyDataset);
    }

    let nan: HashSet<usize> = train
        .nan_columns()
        .into_iter()
        .chain(test.nan_columns())
        .collect();
    let mut cols: Vec<usize> = (0..train.num_columns()).filter(|j| !nan.contains(j)).collect();

    let rows = unique_rows(train, &cols);
    cols.retain(|&j| !is_constant(train, &rows, j));
    if cols.is_empty() {
        return Err(Error::EmptyFeatures);
    }

    let mut outputs = Vec::new();
    for &j in &cols {
        let col = &train.columns[j];
        if !col.is_continuous() || col.scaled {
            outputs.push(OutputColumn {
                source: j,
                column: col.clone(),
                transform: ColumnTransform::Passthrough,
            });
            continue;
        }
        let mut values: Vec<f64> = rows.iter().map(|&i| train.rows[i][j]).collect();
        values.sort_by(f64::total_cmp);
        let mut levels = values.clone();
        levels.dedup();
        if levels.len() <= categorical_max_unique {
            for level in levels {
                outputs.push(OutputColumn {
                    source: j,
                    column: Column {
                        name: format!("{}={}", col.name, level),
                        kind: ColumnKind::OneHot {
                            source: col.name.clone(),
                            level,
                        },
                        scaled: true,
                    },
                    transform: ColumnTransform::OneHot { level },
                });
            }
            continue;
        }
        let (mut lo, mut hi) = (
            quantile_sorted(&values, CLIP_QUANTILES.0),
            quantile_sorted(&values, CLIP_QUANTILES.1),
        );
        if lo >= hi {
            // Percentile window collapsed; fall back to the raw range.
            lo = values[0];
            hi = values[values.len() - 1];
        }
        outputs.push(OutputColumn {
            source: j,
            column: Column {
                name: col.name.clone(),
                kind: ColumnKind::Continuous,
                scaled: true,
            },
            transform: ColumnTransform::Scale {
                clip_lo: lo,
                clip_hi: hi,
                min: lo,
                max: hi,
            },
        });
    }

    let mut pre = Preprocessor {
        input_columns: train.columns.iter().map(|c| c.name.clone()).collect(),
        outputs,
        class_names: train.class_names.clone(),
    };
    let mut train_out = pre.transform(&train.subset(&rows))?;

    loop {
        let all: Vec<usize> = (0..train_out.num_columns()).collect();
        let keep_rows = unique_rows(&train_out, &all);
        let keep_cols: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&j| !is_constant(&train_out, &keep_rows, j))
            .collect();
        if keep_rows.len() == train_out.num_rows() && keep_cols.len() == all.len() {
            break;
        }
        if keep_cols.is_empty() {
            return Err(Error::EmptyFeatures);
        }
        train_out = train_out.subset(&keep_rows);
        train_out.columns = keep_cols.iter().map(|&j| train_out.columns[j].clone()).collect();
        train_out.rows = train_out
            .rows
            .iter()
            .map(|r| keep_cols.iter().map(|&j| r[j]).collect())
            .collect();
        pre.outputs = keep_cols.iter().map(|&j| pre.outputs[j].clone()).collect();
    }

    let test_out = pre.transform(test)?;
    Ok((train_out, test_out, pre))
}
