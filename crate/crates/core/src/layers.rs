//! Threshold, logic and sum layers.
//!
//! Each layer has a relaxed forward pass used during training, a discrete
//! forward pass used at inference, and an analytic backward pass over the
//! relaxed expressions. Backward passes accumulate over a batch; gradients
//! of softmax/sigmoid parameterisations are formed once per batch in the
//! `finish` step since the chain rule through them is linear in the
//! accumulated upstream terms.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{NUM_OPS, OPERATORS};

/// Connectivity threshold applied to `Sigmoid(S/tau)` when discretizing
/// the sum layer.
pub const SUM_THRESHOLD: f64 = 0.8;

/// `logit(SUM_THRESHOLD)`: `Sigmoid(z) >= 0.8` exactly when `z >= ln 4`.
pub const SUM_THRESHOLD_LOGIT: f64 = 2.0 * std::f64::consts::LN_2;

pub const INITIAL_SLOPE: f64 = 2.0;

/// Standard deviation of the Gaussian used for gate, link and sum weights.
pub const WEIGHT_INIT_STD: f64 = 0.1;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Structure(format!(
            "{what}: expected length {want}, got {got}"
        )))
    }
}

/// Index into `mask` of the largest `weights[mask[m]]`; ties go to the
/// earliest entry, and masks are kept sorted, so to the lowest index.
fn masked_argmax<I: Copy + Into<usize>>(weights: &[f64], mask: &[I]) -> usize {
    let mut best = 0;
    for m in 1..mask.len() {
        if weights[mask[m].into()] > weights[mask[best].into()] {
            best = m;
        }
    }
    best
}

fn masked_softmax<I: Copy + Into<usize>>(weights: &[f64], mask: &[I], tau: f64) -> Vec<f64> {
    let max = mask
        .iter()
        .map(|&j| weights[j.into()])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = mask
        .iter()
        .map(|&j| ((weights[j.into()] - max) / tau).exp())
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Writes `d loss / d weights` for a masked softmax given `d loss / d p`.
fn softmax_backward<I: Copy + Into<usize>>(
    p: &[f64],
    dp: &[f64],
    mask: &[I],
    tau: f64,
    out: &mut [f64],
) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for (m, &j) in mask.iter().enumerate() {
        out[j.into()] += p[m] * (dp[m] - dot) / tau;
    }
}

/// Which of the three layer types use straight-through estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteFlags {
    pub threshold: bool,
    pub logic: bool,
    pub sum: bool,
}

// ---------------------------------------------------------------------------
// Threshold layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLayer {
    pub bias: Vec<f64>,
    pub slope: Vec<f64>,
    /// Source feature column of each neuron.
    pub input_index: Vec<usize>,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrads {
    pub bias: Vec<f64>,
    pub slope: Vec<f64>,
}

impl ThresholdGrads {
    pub fn zeros(width: usize) -> Self {
        ThresholdGrads {
            bias: vec![0.0; width],
            slope: vec![0.0; width],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThresholdCache {
    x: Vec<f64>,
    tau: f64,
}

impl ThresholdLayer {
    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self, num_features: usize) -> Result<()> {
        check_len("threshold slope", self.slope.len(), self.bias.len())?;
        check_len("threshold input index", self.input_index.len(), self.bias.len())?;
        if let Some(&bad) = self.input_index.iter().find(|&&j| j >= num_features) {
            return Err(Error::Structure(format!(
                "threshold neuron reads feature {bad} but only {num_features} exist"
            )));
        }
        Ok(())
    }

    /// Hard comparator for neuron `i`: `Heaviside(s*(x-b))` with
    /// `Heaviside(0) = 1`, evaluated without forming the product.
    #[inline]
    pub fn fires(&self, i: usize, x: f64) -> bool {
        let (s, b) = (self.slope[i], self.bias[i]);
        if s > 0.0 {
            x >= b
        } else if s < 0.0 {
            x <= b
        } else {
            true
        }
    }

    pub fn hard_forward(&self, x: &[f64]) -> Vec<bool> {
        (0..self.width())
            .map(|i| self.fires(i, x[self.input_index[i]]))
            .collect()
    }

    pub(crate) fn forward_into(&self, x: &[f64], tau: f64, ste: bool, out: &mut [f64]) {
        for i in 0..self.width() {
            let xi = x[self.input_index[i]];
            out[i] = if ste {
                f64::from(u8::from(self.fires(i, xi)))
            } else {
                sigmoid(self.slope[i] * (xi - self.bias[i]) / tau)
            };
        }
    }

    pub fn soft_forward(&self, x: &[f64], tau: f64, ste: bool) -> Result<Vec<f64>> {
        Ok(self.soft_forward_cached(x, tau, ste)?.0)
    }

    pub fn soft_forward_cached(
        &self,
        x: &[f64],
        tau: f64,
        ste: bool,
    ) -> Result<(Vec<f64>, ThresholdCache)> {
        check_tau(tau)?;
        self.validate(x.len())?;
        let mut out = vec![0.0; self.width()];
        self.forward_into(x, tau, ste, &mut out);
        Ok((
            out,
            ThresholdCache {
                x: x.to_vec(),
                tau,
            },
        ))
    }

    pub(crate) fn accumulate_backward(
        &self,
        x: &[f64],
        tau: f64,
        upstream: &[f64],
        grads: &mut ThresholdGrads,
        mut grad_in: Option<&mut [f64]>,
    ) {
        for i in 0..self.width() {
            let g = upstream[i];
            if g == 0.0 {
                continue;
            }
            let j = self.input_index[i];
            let (s, b) = (self.slope[i], self.bias[i]);
            let y = sigmoid(s * (x[j] - b) / tau);
            let d = g * y * (1.0 - y) / tau;
            grads.bias[i] -= d * s;
            grads.slope[i] += d * (x[j] - b);
            if let Some(gi) = grad_in.as_deref_mut() {
                gi[j] += d * s;
            }
        }
    }

    /// Gradients of the relaxed forward with respect to bias, slope and the
    /// layer input. Under STE the forward value was the hard one; the
    /// gradient is still the sigmoid's.
    pub fn backward(
        &self,
        cache: &ThresholdCache,
        upstream: &[f64],
    ) -> Result<(ThresholdGrads, Vec<f64>)> {
        check_len("threshold upstream gradient", upstream.len(), self.width())?;
        let mut grads = ThresholdGrads::zeros(self.width());
        let mut grad_in = vec![0.0; cache.x.len()];
        self.accumulate_backward(&cache.x, cache.tau, upstream, &mut grads, Some(&mut grad_in));
        Ok((grads, grad_in))
    }
}

/// Initial biases for one feature's group of threshold neurons.
///
/// Grows a single-feature Gini decision tree best-first until it has
/// `group_size` splits (or no split reduces impurity), takes the split
/// points as biases, and pads any shortfall with evenly spaced quantiles of
/// the column. A constant column yields all-0.5 biases. The result is
/// sorted ascending.
pub fn tree_init_biases(
    column: &[f64],
    labels: &[usize],
    num_classes: usize,
    group_size: usize,
) -> Result<Vec<f64>> {
    if group_size == 0 {
        return Err(Error::Config("group_size must be at least 1".into()));
    }
    check_len("tree init labels", labels.len(), column.len())?;
    if let Some(&v) = column.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            what: "threshold init column",
            value: v,
        });
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Range(format!("label {c} for {num_classes} classes")));
    }
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&i, &j| column[i].total_cmp(&column[j]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| column[i]).collect();
    let classes: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    if values.is_empty() || values[0] == values[values.len() - 1] {
        return Ok(vec![0.5; group_size]);
    }

    let mut leaves = vec![(0, values.len())];
    let mut splits = Vec::new();
    while splits.len() < group_size {
        let mut best: Option<(usize, usize, f64, f64)> = None; // leaf, pos, gain, thr
        for (li, &(lo, hi)) in leaves.iter().enumerate() {
            if let Some((pos, gain)) = best_gini_split(&values[lo..hi], &classes[lo..hi], num_classes)
            {
                if best.map_or(true, |b| gain > b.2) {
                    let thr = 0.5 * (values[lo + pos - 1] + values[lo + pos]);
                    best = Some((li, lo + pos, gain, thr));
                }
            }
        }
        let Some((li, pos, _, thr)) = best else { break };
        let (lo, hi) = leaves[li];
        leaves[li] = (lo, pos);
        leaves.insert(li + 1, (pos, hi));
        splits.push(thr);
    }

    let missing = group_size - splits.len();
    for q in 1..=missing {
        splits.push(quantile_sorted(&values, q as f64 / (missing + 1) as f64));
    }
    splits.sort_by(f64::total_cmp);
    Ok(splits)
}

/// Best split position in a sorted range (the right part starts at `pos`)
/// and its weighted Gini decrease. Only positive decreases count.
fn best_gini_split(values: &[f64], classes: &[usize], num_classes: usize) -> Option<(usize, f64)> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mut total = vec![0usize; num_classes];
    for &c in classes {
        total[c] += 1;
    }
    let weighted = |counts: &[usize], m: usize| -> f64 {
        if m == 0 {
            return 0.0;
        }
        let sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
        m as f64 - sq / m as f64
    };
    let parent = weighted(&total, n);
    let mut left = vec![0usize; num_classes];
    let mut right = total;
    let mut best: Option<(usize, f64)> = None;
    for pos in 1..n {
        let c = classes[pos - 1];
        left[c] += 1;
        right[c] -= 1;
        if values[pos - 1] == values[pos] {
            continue;
        }
        let gain = parent - weighted(&left, pos) - weighted(&right, n - pos);
        if gain > 1e-12 && best.map_or(true, |b| gain > b.1) {
            best = Some((pos, gain));
        }
    }
    best
}

/// Linear-interpolation quantile of ascending-sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

// ---------------------------------------------------------------------------
// Logic layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicLayer {
    pub in_width: usize,
    pub out_width: usize,
    /// `out_width x 16`, row-major.
    pub gate_weights: Vec<f64>,
    /// `out_width x in_width`, row-major.
    pub link_a_weights: Vec<f64>,
    pub link_b_weights: Vec<f64>,
    /// Sorted candidate operator IDs per neuron.
    pub gate_mask: Vec<Vec<u8>>,
    /// Sorted candidate input indices per neuron.
    pub link_a_mask: Vec<Vec<usize>>,
    pub link_b_mask: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicGrads {
    pub gate: Vec<f64>,
    pub link_a: Vec<f64>,
    pub link_b: Vec<f64>,
}

/// Softmax probabilities and argmax choices for one parameter state and
/// temperature. Shared by every sample of a batch.
#[derive(Debug, Clone)]
pub struct LogicRelaxation {
    tau: f64,
    ste: bool,
    gate_probs: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    /// Probability-weighted polynomial coefficients `[c0, ca, cb, cab]`.
    mix: Vec<[f64; 4]>,
    /// Argmax `(op, input a, input b)` per neuron.
    choice: Vec<(u8, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LogicAccum {
    /// Per neuron: sums over samples of `g * [1, a, b, a*b]`.
    poly: Vec<[f64; 4]>,
    d_alpha: Vec<Vec<f64>>,
    d_beta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LogicCache {
    relax: LogicRelaxation,
    x: Vec<f64>,
    ab: Vec<(f64, f64)>,
}

impl LogicLayer {
    /// Random layer: Gaussian weights and uniformly sampled candidate masks.
    /// Mask sizes are capped at the number of available candidates.
    pub fn new<R: Rng>(
        in_width: usize,
        out_width: usize,
        subset_gate_num: usize,
        subset_link_num: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(Error::Config(format!(
                "logic layer needs positive widths, got {in_width} -> {out_width}"
            )));
        }
        if subset_gate_num == 0 || subset_link_num == 0 {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid std");
        let gauss = |n: usize, rng: &mut R| -> Vec<f64> {
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        let gate_weights = gauss(out_width * NUM_OPS, rng);
        let link_a_weights = gauss(out_width * in_width, rng);
        let link_b_weights = gauss(out_width * in_width, rng);
        let gates = subset_gate_num.min(NUM_OPS);
        let links = subset_link_num.min(in_width);
        let sorted_sample = |n: usize, k: usize, rng: &mut R| -> Vec<usize> {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        };
        let mut gate_mask = Vec::with_capacity(out_width);
        let mut link_a_mask = Vec::with_capacity(out_width);
        let mut link_b_mask = Vec::with_capacity(out_width);
        for _ in 0..out_width {
            gate_mask.push(
                sorted_sample(NUM_OPS, gates, rng)
                    .into_iter()
                    .map(|k| k as u8)
                    .collect(),
            );
            link_a_mask.push(sorted_sample(in_width, links, rng));
            link_b_mask.push(sorted_sample(in_width, links, rng));
        }
        Ok(LogicLayer {
            in_width,
            out_width,
            gate_weights,
            link_a_weights,
            link_b_weights,
            gate_mask,
            link_a_mask,
            link_b_mask,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (o, i) = (self.out_width, self.in_width);
        check_len("gate weights", self.gate_weights.len(), o * NUM_OPS)?;
        check_len("link-a weights", self.link_a_weights.len(), o * i)?;
        check_len("link-b weights", self.link_b_weights.len(), o * i)?;
        check_len("gate mask", self.gate_mask.len(), o)?;
        check_len("link-a mask", self.link_a_mask.len(), o)?;
        check_len("link-b mask", self.link_b_mask.len(), o)?;
        for n in 0..o {
            if self.gate_mask[n].is_empty()
                || self.link_a_mask[n].is_empty()
                || self.link_b_mask[n].is_empty()
            {
                return Err(Error::Structure(format!("neuron {n} has an empty candidate mask")));
            }
            let sorted_unique = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
            let g: Vec<usize> = self.gate_mask[n].iter().map(|&k| usize::from(k)).collect();
            if !sorted_unique(&g) || g.last().map_or(false, |&k| k >= NUM_OPS) {
                return Err(Error::Structure(format!("neuron {n}: bad gate mask")));
            }
            for m in [&self.link_a_mask[n], &self.link_b_mask[n]] {
                if !sorted_unique(m) || m.last().map_or(false, |&j| j >= i) {
                    return Err(Error::Structure(format!("neuron {n}: bad link mask")));
                }
            }
        }
        Ok(())
    }

    fn gate_row(&self, n: usize) -> &[f64] {
        &self.gate_weights[n * NUM_OPS..(n + 1) * NUM_OPS]
    }

    fn link_rows(&self, n: usize) -> (&[f64], &[f64]) {
        let r = n * self.in_width..(n + 1) * self.in_width;
        (&self.link_a_weights[r.clone()], &self.link_b_weights[r])
    }

    /// Argmax operator and inputs for neuron `n` (lowest index on ties).
    pub fn hard_choice(&self, n: usize) -> (u8, usize, usize) {
        let (u, v) = self.link_rows(n);
        let gm = &self.gate_mask[n];
        let (am, bm) = (&self.link_a_mask[n], &self.link_b_mask[n]);
        (
            gm[masked_argmax(self.gate_row(n), gm)],
            am[masked_argmax(u, am)],
            bm[masked_argmax(v, bm)],
        )
    }

    pub fn hard_forward(&self, x: &[bool]) -> Vec<bool> {
        (0..self.out_width)
            .map(|n| {
                let (k, a, b) = self.hard_choice(n);
                OPERATORS[usize::from(k)].hard(x[a], x[b])
            })
            .collect()
    }

    pub fn relax(&self, tau: f64, ste: bool) -> Result<LogicRelaxation> {
        check_tau(tau)?;
        self.validate()?;
        let o = self.out_width;
        let mut relax = LogicRelaxation {
            tau,
            ste,
            gate_probs: Vec::with_capacity(o),
            alpha: Vec::with_capacity(o),
            beta: Vec::with_capacity(o),
            mix: Vec::with_capacity(o),
            choice: Vec::with_capacity(o),
        };
        for n in 0..o {
            let p = masked_softmax(self.gate_row(n), &self.gate_mask[n], tau);
            let mut mix = [0.0; 4];
            for (m, &k) in self.gate_mask[n].iter().enumerate() {
                let c = OPERATORS[usize::from(k)].coefficients();
                for t in 0..4 {
                    mix[t] += p[m] * c[t];
                }
            }
            let (u, v) = self.link_rows(n);
            relax.alpha.push(masked_softmax(u, &self.link_a_mask[n], tau));
            relax.beta.push(masked_softmax(v, &self.link_b_mask[n], tau));
            relax.gate_probs.push(p);
            relax.mix.push(mix);
            relax.choice.push(self.hard_choice(n));
        }
        Ok(relax)
    }

    /// Relaxed forward for one sample. Records the soft `(a, b)` of every
    /// neuron in `ab` for the backward pass.
    pub(crate) fn forward_into(
        &self,
        relax: &LogicRelaxation,
        x: &[f64],
        out: &mut [f64],
        ab: &mut [(f64, f64)],
    ) {
        for n in 0..self.out_width {
            let a: f64 = self.link_a_mask[n]
                .iter()
                .zip(&relax.alpha[n])
                .map(|(&j, &w)| w * x[j])
                .sum();
            let b: f64 = self.link_b_mask[n]
                .iter()
                .zip(&relax.beta[n])
                .map(|(&j, &w)| w * x[j])
                .sum();
            ab[n] = (a, b);
            out[n] = if relax.ste {
                let (k, ia, ib) = relax.choice[n];
                OPERATORS[usize::from(k)].soft(x[ia], x[ib])
            } else {
                let [c0, ca, cb, cab] = relax.mix[n];
                (c0 + ca * a + cb * b + cab * a * b).clamp(0.0, 1.0)
            };
        }
    }

    pub fn new_accum(&self, relax: &LogicRelaxation) -> LogicAccum {
        LogicAccum {
            poly: vec![[0.0; 4]; self.out_width],
            d_alpha: relax.alpha.iter().map(|v| vec![0.0; v.len()]).collect(),
            d_beta: relax.beta.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub(crate) fn accumulate_backward(
        &self,
        relax: &LogicRelaxation,
        x: &[f64],
        ab: &[(f64, f64)],
        upstream: &[f64],
        acc: &mut LogicAccum,
        mut grad_in: Option<&mut [f64]>,
    ) {
        for n in 0..self.out_width {
            let g = upstream[n];
            if g == 0.0 {
                continue;
            }
            let (a, b) = ab[n];
            let poly = &mut acc.poly[n];
            poly[0] += g;
            poly[1] += g * a;
            poly[2] += g * b;
            poly[3] += g * a * b;
            let [_, ca, cb, cab] = relax.mix[n];
            let ga = g * (ca + cab * b);
            let gb = g * (cb + cab * a);
            for (m, &j) in self.link_a_mask[n].iter().enumerate() {
                acc.d_alpha[n][m] += ga * x[j];
                if let Some(gi) = grad_in.as_deref_mut() {
                    gi[j] += ga * relax.alpha[n][m];
                }
            }
            for (m, &j) in self.link_b_mask[n].iter().enumerate() {
                acc.d_beta[n][m] += gb * x[j];
                if let Some(gi) = grad_in.as_deref_mut() {
                    gi[j] += gb * relax.beta[n][m];
                }
            }
        }
    }

    pub fn finish(&self, relax: &LogicRelaxation, acc: &LogicAccum) -> LogicGrads {
        let (o, i) = (self.out_width, self.in_width);
        let mut grads = LogicGrads {
            gate: vec![0.0; o * NUM_OPS],
            link_a: vec![0.0; o * i],
            link_b: vec![0.0; o * i],
        };
        for n in 0..o {
            let poly = acc.poly[n];
            let dp: Vec<f64> = self.gate_mask[n]
                .iter()
                .map(|&k| {
                    let c = OPERATORS[usize::from(k)].coefficients();
                    c[0] * poly[0] + c[1] * poly[1] + c[2] * poly[2] + c[3] * poly[3]
                })
                .collect();
            softmax_backward(
                &relax.gate_probs[n],
                &dp,
                &self.gate_mask[n],
                relax.tau,
                &mut grads.gate[n * NUM_OPS..(n + 1) * NUM_OPS],
            );
            softmax_backward(
                &relax.alpha[n],
                &acc.d_alpha[n],
                &self.link_a_mask[n],
                relax.tau,
                &mut grads.link_a[n * i..(n + 1) * i],
            );
            softmax_backward(
                &relax.beta[n],
                &acc.d_beta[n],
                &self.link_b_mask[n],
                relax.tau,
                &mut grads.link_b[n * i..(n + 1) * i],
            );
        }
        grads
    }

    pub fn soft_forward(&self, x: &[f64], tau: f64, ste: bool) -> Result<Vec<f64>> {
        Ok(self.soft_forward_cached(x, tau, ste)?.0)
    }

    pub fn soft_forward_cached(
        &self,
        x: &[f64],
        tau: f64,
        ste: bool,
    ) -> Result<(Vec<f64>, LogicCache)> {
        check_len("logic layer input", x.len(), self.in_width)?;
        let relax = self.relax(tau, ste)?;
        let mut out = vec![0.0; self.out_width];
        let mut ab = vec![(0.0, 0.0); self.out_width];
        self.forward_into(&relax, x, &mut out, &mut ab);
        Ok((
            out,
            LogicCache {
                relax,
                x: x.to_vec(),
                ab,
            },
        ))
    }

    pub fn backward(&self, cache: &LogicCache, upstream: &[f64]) -> Result<(LogicGrads, Vec<f64>)> {
        check_len("logic upstream gradient", upstream.len(), self.out_width)?;
        let mut acc = self.new_accum(&cache.relax);
        let mut grad_in = vec![0.0; self.in_width];
        self.accumulate_backward(
            &cache.relax,
            &cache.x,
            &cache.ab,
            upstream,
            &mut acc,
            Some(&mut grad_in),
        );
        Ok((self.finish(&cache.relax, &acc), grad_in))
    }
}

// ---------------------------------------------------------------------------
// Sum layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumLayer {
    pub in_width: usize,
    pub num_classes: usize,
    /// `in_width x num_classes`, row-major.
    pub link_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SumRelaxation {
    tau: f64,
    ste: bool,
    sig: Vec<f64>,
    gate: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SumCache {
    relax: SumRelaxation,
    x: Vec<f64>,
}

impl SumLayer {
    pub fn new<R: Rng>(in_width: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        if in_width == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "sum layer needs input width >= 1 and >= 2 classes, got {in_width}, {num_classes}"
            )));
        }
        let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid std");
        Ok(SumLayer {
            in_width,
            num_classes,
            link_weights: (0..in_width * num_classes)
                .map(|_| normal.sample(rng))
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_len(
            "sum weights",
            self.link_weights.len(),
            self.in_width * self.num_classes,
        )
    }

    /// Whether input `j` feeds class `c` after discretization at `tau`.
    #[inline]
    pub fn connected(&self, j: usize, c: usize, tau: f64) -> bool {
        self.link_weights[j * self.num_classes + c] / tau >= SUM_THRESHOLD_LOGIT
    }

    pub fn hard_forward(&self, x: &[bool], tau: f64) -> Vec<u32> {
        let mut y = vec![0u32; self.num_classes];
        for (j, &bit) in x.iter().enumerate().take(self.in_width) {
            if bit {
                for (c, yc) in y.iter_mut().enumerate() {
                    if self.connected(j, c, tau) {
                        *yc += 1;
                    }
                }
            }
        }
        y
    }

    pub fn relax(&self, tau: f64, ste: bool) -> Result<SumRelaxation> {
        check_tau(tau)?;
        self.validate()?;
        let c = self.num_classes;
        Ok(SumRelaxation {
            tau,
            ste,
            sig: self.link_weights.iter().map(|&s| sigmoid(s / tau)).collect(),
            gate: (0..self.link_weights.len())
                .map(|idx| self.connected(idx / c, idx % c, tau))
                .collect(),
        })
    }

    pub(crate) fn forward_into(&self, relax: &SumRelaxation, x: &[f64], out: &mut [f64]) {
        let c = self.num_classes;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &xj) in x.iter().enumerate() {
            for k in 0..c {
                let w = if relax.ste {
                    f64::from(u8::from(relax.gate[j * c + k]))
                } else {
                    relax.sig[j * c + k]
                };
                out[k] += w * xj;
            }
        }
    }

    /// Accumulates `sum_batch g_c * x_j` into `acc` (shape of the weights);
    /// the sigmoid derivative is applied in `finish`.
    pub(crate) fn accumulate_backward(
        &self,
        relax: &SumRelaxation,
        x: &[f64],
        upstream: &[f64],
        acc: &mut [f64],
        mut grad_in: Option<&mut [f64]>,
    ) {
        let c = self.num_classes;
        for (j, &xj) in x.iter().enumerate() {
            let mut gx = 0.0;
            for k in 0..c {
                acc[j * c + k] += upstream[k] * xj;
                gx += upstream[k] * relax.sig[j * c + k];
            }
            if let Some(gi) = grad_in.as_deref_mut() {
                gi[j] += gx;
            }
        }
    }

    pub fn finish(&self, relax: &SumRelaxation, acc: &[f64]) -> Vec<f64> {
        acc.iter()
            .zip(&relax.sig)
            .map(|(&a, &s)| a * s * (1.0 - s) / relax.tau)
            .collect()
    }

    pub fn soft_forward(&self, x: &[f64], tau: f64, ste: bool) -> Result<Vec<f64>> {
        Ok(self.soft_forward_cached(x, tau, ste)?.0)
    }

    pub fn soft_forward_cached(
        &self,
        x: &[f64],
        tau: f64,
        ste: bool,
    ) -> Result<(Vec<f64>, SumCache)> {
        check_len("sum layer input", x.len(), self.in_width)?;
        let relax = self.relax(tau, ste)?;
        let mut out = vec![0.0; self.num_classes];
        self.forward_into(&relax, x, &mut out);
        Ok((
            out,
            SumCache {
                relax,
                x: x.to_vec(),
            },
        ))
    }

    pub fn backward(&self, cache: &SumCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("sum upstream gradient", upstream.len(), self.num_classes)?;
        let mut acc = vec![0.0; self.link_weights.len()];
        let mut grad_in = vec![0.0; self.in_width];
        self.accumulate_backward(&cache.relax, &cache.x, upstream, &mut acc, Some(&mut grad_in));
        Ok((self.finish(&cache.relax, &acc), grad_in))
    }
}
