use crate::error::{Error, Result};

/// Mean over the classes present in `y_true` of per-class recall.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::Range("balanced accuracy of an empty sample".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Structure(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let classes = y_true.iter().max().unwrap() + 1;
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        if t == p {
            hits[t] += 1;
        }
    }
    let (sum, present) = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .fold((0.0, 0usize), |(acc, n), (&s, &h)| (acc + h as f64 / s as f64, n + 1));
    Ok(sum / present as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Expected maximum of `k` values drawn without replacement from
/// `accuracies`, via order statistics.
pub fn best_at_k(accuracies: &[f64], k: usize) -> Result<f64> {
    let n = accuracies.len();
    if k == 0 || k > n {
        return Err(Error::Range(format!("k = {k} for n = {n}")));
    }
    if k == 1 {
        return Ok(accuracies.iter().sum::<f64>() / n as f64);
    }
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    if k == n {
        return Ok(sorted[n - 1]);
    }
    let total = binomial(n, k);
    Ok((k..=n)
        .map(|i| binomial(i - 1, k - 1) / total * sorted[i - 1])
        .sum())
}
