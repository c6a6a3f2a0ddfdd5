//! Random search over training configurations, scored by stratified
//! cross-validated balanced accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{balanced_accuracy, FeatureMatrix};
use crate::error::{Error, Result};
use crate::layers::SteFlags;
use crate::network::{DlnModel, TrainConfig, GATE_SUBSET_OPTIONS, LINK_SUBSET_OPTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub phase_unified: Vec<bool>,
    pub ste_threshold: Vec<bool>,
    pub ste_logic: Vec<bool>,
    pub ste_sum: Vec<bool>,
    pub subset_gate_num: Vec<usize>,
    pub subset_link_num: Vec<usize>,
    pub concat_input: Vec<bool>,
    pub group_size: Vec<usize>,
    /// Number of logic layers.
    pub depth: Vec<usize>,
    /// Logic-layer width as a multiple of the binarized input width.
    pub width_multiplier: Vec<usize>,
    pub max_width: usize,
    /// Log-uniform range.
    pub learning_rate: (f64, f64),
    pub epochs: Vec<usize>,
    /// Supplies every field the search does not vary.
    pub base: TrainConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            phase_unified: vec![true, false],
            ste_threshold: vec![true, false],
            ste_logic: vec![true, false],
            ste_sum: vec![true, false],
            subset_gate_num: GATE_SUBSET_OPTIONS.to_vec(),
            subset_link_num: LINK_SUBSET_OPTIONS.to_vec(),
            concat_input: vec![true, false],
            group_size: vec![10, 14],
            depth: vec![1, 2],
            width_multiplier: vec![2, 4, 8],
            max_width: 512,
            learning_rate: (0.005, 0.1),
            epochs: vec![30, 60, 100],
            base: TrainConfig::default(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("phase_unified", self.phase_unified.is_empty()),
            ("ste_threshold", self.ste_threshold.is_empty()),
            ("ste_logic", self.ste_logic.is_empty()),
            ("ste_sum", self.ste_sum.is_empty()),
            ("subset_gate_num", self.subset_gate_num.is_empty()),
            ("subset_link_num", self.subset_link_num.is_empty()),
            ("concat_input", self.concat_input.is_empty()),
            ("group_size", self.group_size.is_empty()),
            ("depth", self.depth.is_empty()),
            ("width_multiplier", self.width_multiplier.is_empty()),
            ("epochs", self.epochs.is_empty()),
        ];
        if let Some((axis, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("search axis {axis} has no options")));
        }
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad learning-rate range ({lo}, {hi})")));
        }
        if self.max_width == 0 || self.depth.contains(&0) || self.width_multiplier.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Column counts that determine the binarized input width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub continuous: usize,
    pub binary: usize,
}

impl InputShape {
    pub fn of(data: &FeatureMatrix) -> Self {
        let continuous = data.columns.iter().filter(|c| c.is_continuous()).count();
        InputShape {
            continuous,
            binary: data.num_columns() - continuous,
        }
    }
}

fn pick<T: Copy, R: Rng>(options: &[T], rng: &mut R) -> T {
    options[rng.gen_range(0..options.len())]
}

/// One configuration: a uniform draw per categorical axis and a
/// log-uniform learning rate.
pub fn sample_config<R: Rng>(space: &SearchSpace, shape: InputShape, rng: &mut R) -> TrainConfig {
    let mut cfg = space.base.clone();
    cfg.phase_unified = pick(&space.phase_unified, rng);
    cfg.ste = SteFlags {
        threshold: pick(&space.ste_threshold, rng),
        logic: pick(&space.ste_logic, rng),
        sum: pick(&space.ste_sum, rng),
    };
    cfg.subset_gate_num = pick(&space.subset_gate_num, rng);
    cfg.subset_link_num = pick(&space.subset_link_num, rng);
    cfg.concat_input = pick(&space.concat_input, rng);
    cfg.group_size = pick(&space.group_size, rng);
    let depth = pick(&space.depth, rng);
    let mult = pick(&space.width_multiplier, rng);
    let binarized = (shape.continuous * cfg.group_size + shape.binary).max(1);
    cfg.hidden_sizes = vec![(mult * binarized).min(space.max_width); depth];
    let (lo, hi) = space.learning_rate;
    cfg.learning_rate = if lo == hi {
        lo
    } else {
        (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
    };
    cfg.epochs = pick(&space.epochs, rng);
    cfg
}

/// More folds for smaller training sets: 4 up to 200 samples, 3 up to
/// 1000, 2 beyond.
pub fn choose_folds(train_size: usize) -> Result<usize> {
    match train_size {
        0..=3 => Err(Error::TooSmall(train_size)),
        4..=200 => Ok(4),
        201..=1000 => Ok(3),
        _ => Ok(2),
    }
}

/// Fold index of every sample; each class is shuffled and dealt
/// round-robin so every fold sees every class.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < folds {
            return Err(Error::Stratification {
                class,
                count: members.len(),
                folds,
            });
        }
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: TrainConfig,
    /// Mean of `fold_scores`; `-inf` for a failed trial.
    pub cv_score: f64,
    pub fold_scores: Vec<f64>,
    pub seed: u64,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

/// Trains on all folds but one and scores hard-inference balanced
/// accuracy on the held-out fold, for every fold.
pub fn cross_validate(
    config: &TrainConfig,
    data: &FeatureMatrix,
    folds: usize,
    seed: u64,
) -> Result<TrialRecord> {
    let start = Instant::now();
    config.validate()?;
    let assignment = stratified_folds(&data.labels, folds, seed)?;
    let mut fold_scores = Vec::with_capacity(folds);
    for k in 0..folds {
        let (held, kept): (Vec<usize>, Vec<usize>) =
            (0..data.num_rows()).partition(|&i| assignment[i] == k);
        let train = data.subset(&kept);
        let valid = data.subset(&held);
        let mut model = DlnModel::build(config, &train)?;
        model.train(&train)?;
        let pred = model.predict(&valid)?;
        fold_scores.push(balanced_accuracy(&valid.labels, &pred)?);
    }
    Ok(TrialRecord {
        trial: 0,
        config: config.clone(),
        cv_score: fold_scores.iter().sum::<f64>() / folds as f64,
        fold_scores,
        seed,
        error: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub best_trial: usize,
    pub records: Vec<TrialRecord>,
}

fn run_trial(space: &SearchSpace, data: &FeatureMatrix, folds: usize, seed: u64, trial: usize) -> TrialRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let mut config = sample_config(space, InputShape::of(data), &mut rng);
    config.seed = rng.gen();
    let cv_seed: u64 = rng.gen();
    let start = Instant::now();
    match cross_validate(&config, data, folds, cv_seed) {
        Ok(mut rec) => {
            rec.trial = trial;
            rec
        }
        Err(e) => TrialRecord {
            trial,
            config,
            cv_score: f64::NEG_INFINITY,
            fold_scores: Vec::new(),
            seed: cv_seed,
            error: Some(e.to_string()),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    }
}

/// Cross-validates `n_trials` sampled configurations and returns the best
/// (earliest on ties). Trial `t` draws from its own RNG stream of `seed`, so
/// results do not depend on `workers`.
pub fn run_search(
    space: &SearchSpace,
    data: &FeatureMatrix,
    n_trials: usize,
    seed: u64,
    workers: usize,
) -> Result<SearchResult> {
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    space.validate()?;
    let folds = choose_folds(data.num_rows())?;
    let slots: Mutex<Vec<Option<TrialRecord>>> = Mutex::new(vec![None; n_trials]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n_trials) {
            s.spawn(|| loop {
                let t = next.fetch_add(1, Ordering::Relaxed);
                if t >= n_trials {
                    break;
                }
                let rec = run_trial(space, data, folds, seed, t);
                slots.lock().unwrap()[t] = Some(rec);
            });
        }
    });
    let records: Vec<TrialRecord> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every trial ran"))
        .collect();
    let mut best_trial = 0;
    for (t, r) in records.iter().enumerate() {
        if r.cv_score > records[best_trial].cv_score {
            best_trial = t;
        }
    }
    Ok(SearchResult {
        best: records[best_trial].config.clone(),
        best_trial,
        records,
    })
}

/// One JSON object per line.
pub fn history_jsonl(records: &[TrialRecord]) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        trial: usize,
        config: &'a TrainConfig,
        fold_scores: &'a [f64],
        cv_score: Option<f64>,
        seed: u64,
        error: &'a Option<String>,
        wall_time_secs: f64,
    }
    let mut out = String::new();
    for r in records {
        let line = Line {
            trial: r.trial,
            config: &r.config,
            fold_scores: &r.fold_scores,
            cv_score: r.cv_score.is_finite().then_some(r.cv_score),
            seed: r.seed,
            error: &r.error,
            wall_time_secs: r.wall_time_secs,
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Option counts per search axis.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConfigStats {
    pub runs: usize,
    pub axes: BTreeMap<String, BTreeMap<String, usize>>,
    /// `(subset_gate_num, subset_link_num)` counts.
    pub subset_joint: BTreeMap<String, usize>,
    /// Same axes over every trial rather than only the selected configs.
    pub trial_axes: BTreeMap<String, BTreeMap<String, usize>>,
}

fn axis_values(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        (
            "training",
            if c.phase_unified { "unified" } else { "alternate" }.to_string(),
        ),
        ("ste_threshold", c.ste.threshold.to_string()),
        ("ste_logic", c.ste.logic.to_string()),
        ("ste_sum", c.ste.sum.to_string()),
        ("subset_gate_num", c.subset_gate_num.to_string()),
        ("subset_link_num", c.subset_link_num.to_string()),
        ("concat_input", c.concat_input.to_string()),
        ("group_size", c.group_size.to_string()),
        ("depth", c.hidden_sizes.len().to_string()),
    ]
}

fn tally<'a>(configs: impl Iterator<Item = &'a TrainConfig>) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut axes: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for c in configs {
        for (axis, value) in axis_values(c) {
            *axes.entry(axis.into()).or_default().entry(value).or_default() += 1;
        }
    }
    axes
}

pub fn config_stats(records: &[TrialRecord], selected: &[TrainConfig]) -> ConfigStats {
    let mut subset_joint = BTreeMap::new();
    for c in selected {
        *subset_joint
            .entry(format!("{}x{}", c.subset_gate_num, c.subset_link_num))
            .or_default() += 1;
    }
    ConfigStats {
        runs: selected.len(),
        axes: tally(selected.iter()),
        subset_joint,
        trial_axes: tally(records.iter().map(|r| &r.config)),
    }
}

impl ConfigStats {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<10} {:>6} {:>7}", "axis", "option", "count", "share");
        for (axis, counts) in &self.axes {
            for (value, n) in counts {
                let share = 100.0 * *n as f64 / self.runs.max(1) as f64;
                let _ = writeln!(out, "{axis:<16} {value:<10} {n:>6} {share:>6.1}%");
            }
        }
        for (pair, n) in &self.subset_joint {
            let _ = writeln!(out, "{:<16} {pair:<10} {n:>6}", "gate x link");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_rule() {
        assert_eq!(choose_folds(150).unwrap(), 4);
        assert_eq!(choose_folds(200).unwrap(), 4);
        assert_eq!(choose_folds(201).unwrap(), 3);
        assert_eq!(choose_folds(1000).unwrap(), 3);
        assert_eq!(choose_folds(5000).unwrap(), 2);
        assert!(matches!(choose_folds(3), Err(Error::TooSmall(3))));
    }

    #[test]
    fn degenerate_space_returns_its_only_config() {
        let base = TrainConfig::default();
        let space = SearchSpace {
            phase_unified: vec![false],
            ste_threshold: vec![true],
            ste_logic: vec![false],
            ste_sum: vec![true],
            subset_gate_num: vec![8],
            subset_link_num: vec![2],
            concat_input: vec![true],
            group_size: vec![14],
            depth: vec![2],
            width_multiplier: vec![4],
            max_width: 512,
            learning_rate: (0.02, 0.02),
            epochs: vec![17],
            base: base.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = sample_config(&space, InputShape { continuous: 2, binary: 1 }, &mut rng);
        let expected = TrainConfig {
            phase_unified: false,
            ste: SteFlags {
                threshold: true,
                logic: false,
                sum: true,
            },
            subset_gate_num: 8,
            subset_link_num: 2,
            concat_input: true,
            group_size: 14,
            hidden_sizes: vec![116, 116],
            learning_rate: 0.02,
            epochs: 17,
            ..base
        };
        assert_eq!(cfg, expected);
    }

    #[test]
    fn widths_are_capped() {
        let space = SearchSpace {
            width_multiplier: vec![8],
            group_size: vec![14],
            ..SearchSpace::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = sample_config(&space, InputShape { continuous: 40, binary: 0 }, &mut rng);
        assert!(cfg.hidden_sizes.iter().all(|&w| w == 512));
    }

    #[test]
    fn stratification_error() {
        let labels = [0, 0, 0, 1, 1];
        assert!(matches!(
            stratified_folds(&labels, 3, 0),
            Err(Error::Stratification { class: 1, count: 2, folds: 3 })
        ));
    }

    #[test]
    fn stats_sum_to_runs() {
        let a = TrainConfig {
            phase_unified: false,
            ..TrainConfig::default()
        };
        let s = config_stats(&[], &[a.clone()]);
        assert_eq!(s.axes["training"]["alternate"], 1);
        let b = TrainConfig::default();
        let s = config_stats(&[], &[a, b.clone(), b]);
        for counts in s.axes.values() {
            assert_eq!(counts.values().sum::<usize>(), 3);
        }
        assert_eq!(s.subset_joint.values().sum::<usize>(), 3);
        assert!(s.render().contains("alternate"));
    }
}
