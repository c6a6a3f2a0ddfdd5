//! A small fixed bank of per-sequence summary statistics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Column, FeatureMatrix, SequenceDataset};
use crate::error::{Error, Result};
use crate::layers::quantile_sorted;

pub const FEATURE_NAMES: [&str; 14] = [
    "mean",
    "std",
    "min",
    "max",
    "median",
    "iqr",
    "acf_lag1",
    "acf_lag2",
    "acf_lag3",
    "zero_crossing_rate",
    "trend_slope",
    "mean_abs_diff",
    "local_maxima",
    "spectral_centroid",
];

/// Autocorrelation at `lag`, normalised per overlapping pair:
/// `mean_t[(x_t - mu)(x_{t+lag} - mu)] / var`.
fn autocorrelation(x: &[f64], mean: f64, var: f64, lag: usize) -> f64 {
    if var == 0.0 || lag >= x.len() {
        return 0.0;
    }
    let pairs = x.len() - lag;
    let cov: f64 = (0..pairs).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum::<f64>() / pairs as f64;
    cov / var
}

/// Magnitude-weighted mean frequency (cycles per sample) over the
/// non-DC bins `1..=n/2` of the DFT.
fn spectral_centroid(x: &[f64]) -> f64 {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut num, mut den) = (0.0, 0.0);
    for (f, c) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
        let m = c.norm();
        num += m * f as f64 / n as f64;
        den += m;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn sequence_features(x: &[f64]) -> [f64; 14] {
    let n = x.len();
    let nf = n as f64;
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[n - 1]);
    let constant = min == max;
    let mean = if constant { min } else { x.iter().sum::<f64>() / nf };
    let var = if constant {
        0.0
    } else {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf
    };

    let crossings = if constant {
        0
    } else {
        x.windows(2)
            .filter(|w| (w[0] - mean) * (w[1] - mean) < 0.0)
            .count()
    };

    let t_mean = (nf - 1.0) / 2.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - mean);
        sxx += dt * dt;
    }

    let mean_abs_diff = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (nf - 1.0);
    let local_maxima = x
        .windows(3)
        .filter(|w| w[1] > w[0] && w[1] > w[2])
        .count();

    [
        mean,
        var.sqrt(),
        min,
        max,
        quantile_sorted(&sorted, 0.5),
        quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25),
        autocorrelation(x, mean, var, 1),
        autocorrelation(x, mean, var, 2),
        autocorrelation(x, mean, var, 3),
        crossings as f64 / (nf - 1.0),
        if constant { 0.0 } else { sxy / sxx },
        mean_abs_diff,
        local_maxima as f64,
        spectral_centroid(x),
    ]
}

pub fn extract_basic_features(ds: &SequenceDataset) -> Result<FeatureMatrix> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = ds
        .sequences
        .iter()
        .enumerate()
        .map(|(index, s)| {
            if s.len() < 4 {
                Err(Error::InsufficientLength { index, len: s.len() })
            } else {
                Ok(sequence_features(s).to_vec())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let columns = FEATURE_NAMES.iter().map(|&n| Column::raw(n)).collect();
    Ok(FeatureMatrix::from_label_names(columns, rows, &ds.labels))
}
