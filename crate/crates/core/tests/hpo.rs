mod common;

use std::collections::BTreeMap;

use common::{rng, threshold_task, Task};
use dln::hpo::{
    choose_folds, cross_validate, history_jsonl, run_search, sample_config, stratified_folds, InputShape,
    SearchResult, SearchSpace, TrialRecord,
};
use dln::{Error, TrainConfig};
use rand::Rng;

/// |count - n p| within three binomial standard deviations.
fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

fn check_uniform<T: Ord + Clone + std::fmt::Debug>(name: &str, draws: &[T], options: &[T]) {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for d in draws {
        counts.entry(d.clone()).and_modify(|c| *c += 1).or_insert(1);
    }
    assert!(counts.keys().all(|k| options.contains(k)), "{name}: {counts:?}");
    for o in options {
        let c = counts.get(o).copied().unwrap_or(0);
        assert!(within_3_sigma(c, draws.len(), 1.0 / options.len() as f64), "{name}={o:?}: {c}");
    }
}

#[test]
fn sampling_frequencies_match_the_space() {
    let space = SearchSpace::default();
    let shape = InputShape { continuous: 3, binary: 2 };
    let mut r = rng(61);
    let n = 10_000;
    let draws: Vec<TrainConfig> = (0..n).map(|_| sample_config(&space, shape, &mut r)).collect();

    let pick = |f: fn(&TrainConfig) -> usize| draws.iter().map(f).collect::<Vec<_>>();
    check_uniform("phase_unified", &pick(|c| c.phase_unified as usize), &[0, 1]);
    check_uniform("ste_threshold", &pick(|c| c.ste.threshold as usize), &[0, 1]);
    check_uniform("ste_logic", &pick(|c| c.ste.logic as usize), &[0, 1]);
    check_uniform("ste_sum", &pick(|c| c.ste.sum as usize), &[0, 1]);
    check_uniform("concat_input", &pick(|c| c.concat_input as usize), &[0, 1]);
    check_uniform("subset_gate_num", &pick(|c| c.subset_gate_num), &space.subset_gate_num);
    check_uniform("subset_link_num", &pick(|c| c.subset_link_num), &space.subset_link_num);
    check_uniform("group_size", &pick(|c| c.group_size), &space.group_size);
    check_uniform("depth", &pick(|c| c.hidden_sizes.len()), &space.depth);
    check_uniform("epochs", &pick(|c| c.epochs), &space.epochs);

    // Width is the multiplier times the binarized width, capped.
    let mut mults = Vec::with_capacity(n);
    for c in &draws {
        let binarized = 3 * c.group_size + 2;
        let w = c.hidden_sizes[0];
        assert!(c.hidden_sizes.iter().all(|&h| h == w));
        let m = space
            .width_multiplier
            .iter()
            .copied()
            .find(|&m| (m * binarized).min(space.max_width) == w)
            .expect("width is multiplier times binarized width");
        mults.push(m);
    }
    check_uniform("width_multiplier", &mults, &space.width_multiplier);

    // Log-uniform learning rate: ln(lr) is uniform on [ln lo, ln hi].
    let (lo, hi) = space.learning_rate;
    let u: Vec<f64> = draws
        .iter()
        .map(|c| (c.learning_rate.ln() - lo.ln()) / (hi.ln() - lo.ln()))
        .collect();
    assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
    let mean = u.iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() <= 3.0 * (1.0 / 12.0 / n as f64).sqrt(), "{mean}");
    for q in 0..4 {
        let c = u
            .iter()
            .filter(|&&v| v >= q as f64 / 4.0 && v < (q + 1) as f64 / 4.0)
            .count();
        assert!(within_3_sigma(c, n, 0.25), "quartile {q}: {c}");
    }
}

#[test]
fn widths_respect_the_cap() {
    let space = SearchSpace::default();
    let mut r = rng(62);
    for _ in 0..200 {
        let c = sample_config(&space, InputShape { continuous: 40, binary: 7 }, &mut r);
        assert!(c.hidden_sizes.iter().all(|&h| h == space.max_width));
    }
}

#[test]
fn fold_count_rule() {
    assert!(matches!(choose_folds(3), Err(Error::TooSmall(3))));
    assert_eq!(choose_folds(4).unwrap(), 4);
    assert_eq!(choose_folds(200).unwrap(), 4);
    assert_eq!(choose_folds(201).unwrap(), 3);
    assert_eq!(choose_folds(1000).unwrap(), 3);
    assert_eq!(choose_folds(1001).unwrap(), 2);
}

#[test]
fn stratified_folds_partition_every_class() {
    let mut r = rng(63);
    for _ in 0..200 {
        let folds = r.gen_range(2..=5);
        let classes = r.gen_range(1..=4);
        let n = r.gen_range(folds * classes..120);
        let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        // Guarantee each class can be split.
        for (i, l) in labels.iter_mut().take(folds * classes).enumerate() {
            *l = i % classes;
        }
        let seed = r.gen();
        let a = stratified_folds(&labels, folds, seed).unwrap();
        assert_eq!(a, stratified_folds(&labels, folds, seed).unwrap());
        assert_eq!(a.len(), n);
        assert!(a.iter().all(|&k| k < folds));
        for c in 0..classes {
            let total = labels.iter().filter(|&&l| l == c).count();
            for k in 0..folds {
                let in_fold = (0..n).filter(|&i| labels[i] == c && a[i] == k).count();
                assert!(in_fold == total / folds || in_fold == total / folds + 1);
            }
        }
    }
    assert!(matches!(
        stratified_folds(&[0, 0, 0, 1], 2, 0),
        Err(Error::Stratification { class: 1, count: 1, folds: 2 })
    ));
    assert!(matches!(stratified_folds(&[0, 1], 1, 0), Err(Error::Config(_))));
}

fn small_space() -> SearchSpace {
    SearchSpace {
        group_size: vec![2, 3],
        width_multiplier: vec![2, 4],
        epochs: vec![3, 5],
        ..SearchSpace::default()
    }
}

#[test]
fn cross_validation_scores_each_fold() {
    let data = threshold_task(Task::And, 80, 64);
    let config = TrainConfig {
        epochs: 5,
        hidden_sizes: vec![8],
        group_size: 2,
        ..TrainConfig::default()
    };
    let rec = cross_validate(&config, &data, 4, 7).unwrap();
    assert_eq!(rec.fold_scores.len(), 4);
    assert!(rec.fold_scores.iter().all(|s| (0.0..=1.0).contains(s)));
    assert!((rec.cv_score - rec.fold_scores.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    assert_eq!(rec, TrialRecord { wall_time_secs: rec.wall_time_secs, ..cross_validate(&config, &data, 4, 7).unwrap() });
}

#[test]
fn search_is_deterministic_across_workers() {
    let data = threshold_task(Task::Xor, 60, 65);
    let space = small_space();
    let one = run_search(&space, &data, 1, 3, 1).unwrap();
    assert_eq!(one.records.len(), 1);
    assert_eq!(one.best_trial, 0);

    let strip = |mut r: SearchResult| {
        r.records.iter_mut().for_each(|t| t.wall_time_secs = 0.0);
        r
    };
    let a = strip(run_search(&space, &data, 5, 3, 1).unwrap());
    let b = strip(run_search(&space, &data, 5, 3, 4).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 5);
    assert_eq!(a.records[0], strip(one).records[0]);
    for (t, rec) in a.records.iter().enumerate() {
        assert_eq!(rec.trial, t);
        assert!(rec.cv_score <= a.records[a.best_trial].cv_score);
    }
    for rec in &a.records[..a.best_trial] {
        assert!(rec.cv_score < a.records[a.best_trial].cv_score);
    }
    assert_eq!(a.best, a.records[a.best_trial].config);
    a.best.validate().unwrap();

    let history = history_jsonl(&a.records);
    assert_eq!(history.lines().count(), 5);
    for line in history.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(matches!(run_search(&space, &data, 0, 3, 1), Err(Error::Config(_))));
}

#[test]
fn failed_trials_score_negative_infinity() {
    // Class "2" has a single member, so no fold split is possible.
    let mut data = threshold_task(Task::And, 40, 66);
    let labels: Vec<String> = (0..40)
        .map(|i| if i == 0 { "2".to_string() } else { data.label_names()[data.labels[i]].clone() })
        .collect();
    data = common::matrix(data.rows.clone(), &labels);
    let res = run_search(&small_space(), &data, 3, 1, 2).unwrap();
    for rec in &res.records {
        assert_eq!(rec.cv_score, f64::NEG_INFINITY);
        assert!(rec.error.is_some());
        assert!(rec.fold_scores.is_empty());
    }
    assert_eq!(res.best_trial, 0);
    let history = history_jsonl(&res.records);
    assert_eq!(history.lines().count(), 3);
}
