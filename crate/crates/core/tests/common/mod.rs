#![allow(dead_code)]

use std::collections::HashSet;

use dln::data::{read_feature_csv, Column};
use dln::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Label 1 iff x0 > 0.5 and x1 > 0.5.
    And,
    /// Label 1 iff exactly one of x0 > 0.5, x1 > 0.5.
    Xor,
}

/// Two features uniform on [0,1], labelled by `task`. Columns are marked
/// scaled so the data can feed a model without preprocessing.
pub fn threshold_task(task: Task, n: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, b): (f64, f64) = (r.gen(), r.gen());
        let y = match task {
            Task::And => a > 0.5 && b > 0.5,
            Task::Xor => (a > 0.5) != (b > 0.5),
        };
        rows.push(vec![a, b]);
        labels.push(if y { "1" } else { "0" }.to_string());
    }
    matrix(rows, &labels)
}

pub fn matrix(rows: Vec<Vec<f64>>, labels: &[String]) -> FeatureMatrix {
    let width = rows.first().map_or(0, Vec::len);
    let columns = (0..width)
        .map(|j| Column {
            scaled: true,
            ..Column::raw(format!("x{j}"))
        })
        .collect();
    FeatureMatrix::from_label_names(columns, rows, labels)
}

/// `n` rows of `features` uniform features with `classes` random labels.
pub fn random_data(r: &mut ChaCha8Rng, n: usize, features: usize, classes: usize) -> FeatureMatrix {
    loop {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..features).map(|_| r.gen()).collect())
            .collect();
        let labels: Vec<String> = (0..n).map(|_| r.gen_range(0..classes).to_string()).collect();
        let m = matrix(rows, &labels);
        if m.num_classes() == classes {
            return m;
        }
    }
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn gaussian(r: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(r)).collect()
}

/// Columns: `nan` (one NaN), `dup` source rows, `const`, `flag` (two
/// values), `wide` with outliers, `smooth`, plus a `test_nan` column that
/// is clean in train but has a NaN in test.
pub fn adversarial(seed: u64) -> (FeatureMatrix, FeatureMatrix) {
    let mut r = rng(seed);
    let header = "nan,const,flag,wide,smooth,test_nan,label";
    let mut train = String::from(header);
    train.push('\n');
    for i in 0..120 {
        let wide = if i == 3 { 1e6 } else if i == 7 { -1e6 } else { r.gen_range(0.0..10.0) };
        let nan = if i == 11 { "NaN".to_string() } else { format!("{}", r.gen::<f64>()) };
        let line = format!(
            "{nan},4.2,{},{wide},{},{},{}\n",
            i % 2,
            r.gen_range(-3.0..3.0),
            r.gen::<f64>(),
            i % 3
        );
        train.push_str(&line);
        if i % 10 == 0 {
            train.push_str(&line);
        }
    }
    let mut test = String::from(header);
    test.push('\n');
    for i in 0..40 {
        let tn = if i == 5 { "NaN".to_string() } else { "0.5".to_string() };
        test.push_str(&format!(
            "0.3,4.2,{},{},{},{tn},{}\n",
            i % 2,
            r.gen_range(-20.0..20.0),
            r.gen_range(-5.0..5.0),
            i % 3
        ));
    }
    (
        read_feature_csv(train.as_bytes()).unwrap(),
        read_feature_csv(test.as_bytes()).unwrap(),
    )
}

pub fn assert_contract(tr: &FeatureMatrix, te: &FeatureMatrix) {
    for m in [tr, te] {
        for row in &m.rows {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)), "{row:?}");
        }
    }
    for j in 0..tr.num_columns() {
        let first = tr.rows[0][j];
        assert!(tr.rows.iter().any(|r| r[j] != first), "constant column {}", tr.columns[j].name);
    }
    let mut seen = HashSet::new();
    for (row, &l) in tr.rows.iter().zip(&tr.labels) {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).chain([l as u64]).collect();
        assert!(seen.insert(key), "duplicate training row");
    }
}
