//! Full network: threshold layer, stacked logic layers and a sum layer,
//! with the training loop and model persistence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Column, FeatureMatrix, Preprocessor};
use crate::error::{Error, Result};
use crate::layers::{
    check_tau, tree_init_biases, LogicAccum, LogicGrads, LogicLayer, LogicRelaxation, SteFlags,
    SumLayer, SumRelaxation, ThresholdGrads, ThresholdLayer, INITIAL_SLOPE,
};

pub const GATE_SUBSET_OPTIONS: [usize; 3] = [16, 8, 4];
pub const LINK_SUBSET_OPTIONS: [usize; 5] = [16, 8, 4, 2, 1];

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bump when the model file layout changes.
pub const MODEL_FORMAT_VERSION: u64 = 1;
const MODEL_FORMAT_NAME: &str = "dln-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub group_size: usize,
    pub phase_unified: bool,
    pub ste: SteFlags,
    pub subset_gate_num: usize,
    pub subset_link_num: usize,
    pub concat_input: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_sizes: vec![32],
            group_size: 10,
            phase_unified: true,
            ste: SteFlags::default(),
            subset_gate_num: 16,
            subset_link_num: 16,
            concat_input: false,
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 64,
            tau_start: 1.0,
            tau_end: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_sizes.is_empty() {
            return bad("hidden_sizes must list at least one logic layer".into());
        }
        if self.hidden_sizes.contains(&0) {
            return bad("logic layer widths must be positive".into());
        }
        if self.group_size == 0 {
            return bad("group_size must be positive".into());
        }
        if !GATE_SUBSET_OPTIONS.contains(&self.subset_gate_num) {
            return bad(format!(
                "subset_gate_num {} not in {GATE_SUBSET_OPTIONS:?}",
                self.subset_gate_num
            ));
        }
        if !LINK_SUBSET_OPTIONS.contains(&self.subset_link_num) {
            return bad(format!(
                "subset_link_num {} not in {LINK_SUBSET_OPTIONS:?}",
                self.subset_link_num
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end && self.tau_start.is_finite()) {
            return bad(format!(
                "need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            ));
        }
        Ok(())
    }

    /// Temperature of epoch `e`: exponential decay from `tau_start` that
    /// lands exactly on `tau_end` in the last epoch.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || epoch + 1 >= self.epochs {
            return self.tau_end;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }
}

/// Whether a parameter tensor selects neuron functions or connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Function,
    Connection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlnModel {
    pub config: TrainConfig,
    pub features: Vec<Column>,
    pub class_names: Vec<String>,
    pub threshold: ThresholdLayer,
    /// Feature columns that are already binary and skip thresholding.
    pub bit_inputs: Vec<usize>,
    pub logic_layers: Vec<LogicLayer>,
    pub sum: SumLayer,
    pub final_tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessor: Option<Preprocessor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub threshold: ThresholdGrads,
    pub logic: Vec<LogicGrads>,
    pub sum: Vec<f64>,
}

impl ModelGrads {
    /// Gradient tensors in the order of [`DlnModel::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.threshold.bias, &self.threshold.slope];
        for g in &self.logic {
            v.push(&g.gate);
            v.push(&g.link_a);
            v.push(&g.link_b);
        }
        v.push(&self.sum);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub loss: f64,
}

/// Softmax cross-entropy of `scores` against class `label`.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::Range(format!(
            "label {label} for {} classes",
            scores.len()
        )));
    }
    Ok(cross_entropy_grad(scores, label, None))
}

/// Loss value; writes `d loss / d scores` into `grad` when given.
pub fn cross_entropy_grad(scores: &[f64], label: usize, grad: Option<&mut [f64]>) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let log_z = max + z.ln();
    if let Some(g) = grad {
        for (gi, &s) in g.iter_mut().zip(scores) {
            *gi = (s - log_z).exp();
        }
        g[label] -= 1.0;
    }
    log_z - scores[label]
}

/// Lowest-index argmax of integer scores.
pub fn argmax_class(scores: &[u32]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

struct Relaxed {
    logic: Vec<LogicRelaxation>,
    sum: SumRelaxation,
}

/// Per-sample activations kept for the backward pass.
struct Trace {
    inputs: Vec<Vec<f64>>,
    ab: Vec<Vec<(f64, f64)>>,
    last: Vec<f64>,
    scores: Vec<f64>,
}

impl DlnModel {
    /// Builds an untrained network for `train`'s schema. Threshold biases
    /// come from per-feature decision trees on the training data.
    pub fn build(config: &TrainConfig, train: &FeatureMatrix) -> Result<Self> {
        config.validate()?;
        let num_features = train.num_columns();
        let num_classes = train.num_classes();
        if num_features == 0 {
            return Err(Error::Config("at least one feature column is required".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "at least two classes are required, found {num_classes}"
            )));
        }
        if train.num_rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut threshold = ThresholdLayer {
            bias: Vec::new(),
            slope: Vec::new(),
            input_index: Vec::new(),
            group_size: config.group_size,
        };
        let mut bit_inputs = Vec::new();
        for (j, col) in train.columns.iter().enumerate() {
            if !col.is_continuous() {
                bit_inputs.push(j);
                continue;
            }
            let column = train.column(j);
            let biases = tree_init_biases(&column, &train.labels, num_classes, config.group_size)?;
            threshold.slope.extend(std::iter::repeat(INITIAL_SLOPE).take(biases.len()));
            threshold.input_index.extend(std::iter::repeat(j).take(biases.len()));
            threshold.bias.extend(biases);
        }

        let binarized = threshold.width() + bit_inputs.len();
        let mut logic_layers = Vec::with_capacity(config.hidden_sizes.len());
        let mut prev = binarized;
        for (l, &width) in config.hidden_sizes.iter().enumerate() {
            let in_width = if l > 0 && config.concat_input {
                prev + binarized
            } else {
                prev
            };
            logic_layers.push(LogicLayer::new(
                in_width,
                width,
                config.subset_gate_num,
                config.subset_link_num,
                &mut rng,
            )?);
            prev = width;
        }
        let sum = SumLayer::new(prev, num_classes, &mut rng)?;

        Ok(DlnModel {
            config: config.clone(),
            features: train.columns.clone(),
            class_names: train.class_names.clone(),
            threshold,
            bit_inputs,
            logic_layers,
            sum,
            final_tau: config.tau_start,
            preprocessor: None,
        })
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.sum.num_classes
    }

    /// Width of the binary vector feeding the first logic layer.
    pub fn binarized_width(&self) -> usize {
        self.threshold.width() + self.bit_inputs.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.threshold.validate(self.num_features())?;
        if let Some(&j) = self.bit_inputs.iter().find(|&&j| j >= self.num_features()) {
            return Err(Error::Structure(format!("bit input {j} out of range")));
        }
        let binarized = self.binarized_width();
        let mut prev = binarized;
        for (l, layer) in self.logic_layers.iter().enumerate() {
            layer.validate()?;
            let want = if l > 0 && self.config.concat_input {
                prev + binarized
            } else {
                prev
            };
            if layer.in_width != want {
                return Err(Error::Structure(format!(
                    "logic layer {l} expects {} inputs, but {want} arrive",
                    layer.in_width
                )));
            }
            prev = layer.out_width;
        }
        self.sum.validate()?;
        if self.sum.in_width != prev {
            return Err(Error::Structure(format!(
                "sum layer expects {} inputs, but {prev} arrive",
                self.sum.in_width
            )));
        }
        check_tau(self.final_tau)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_features() {
            return Err(Error::Structure(format!(
                "expected {} features, got {}",
                self.num_features(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Binary input vector of the first logic layer.
    pub fn binarize(&self, x: &[f64]) -> Vec<bool> {
        let mut bits = self.threshold.hard_forward(x);
        bits.extend(self.bit_inputs.iter().map(|&j| x[j] >= 0.5));
        bits
    }

    /// Discrete forward from the binarized input to per-class counts.
    pub fn hard_scores_from_bits(&self, bits: &[bool]) -> Vec<u32> {
        let mut cur = self.logic_layers[0].hard_forward(bits);
        for layer in &self.logic_layers[1..] {
            if self.config.concat_input {
                cur.extend_from_slice(bits);
            }
            cur = layer.hard_forward(&cur);
        }
        self.sum.hard_forward(&cur, self.final_tau)
    }

    /// Predicted class (lowest index on ties) and per-class rule counts.
    pub fn hard_predict(&self, x: &[f64]) -> Result<(usize, Vec<u32>)> {
        self.check_input(x)?;
        let scores = self.hard_scores_from_bits(&self.binarize(x));
        Ok((argmax_class(&scores), scores))
    }

    pub fn predict(&self, data: &FeatureMatrix) -> Result<Vec<usize>> {
        data.rows
            .iter()
            .map(|r| self.hard_predict(r).map(|(c, _)| c))
            .collect()
    }

    fn relaxed(&self, tau: f64) -> Result<Relaxed> {
        let ste = self.config.ste;
        Ok(Relaxed {
            logic: self
                .logic_layers
                .iter()
                .map(|l| l.relax(tau, ste.logic))
                .collect::<Result<_>>()?,
            sum: self.sum.relax(tau, ste.sum)?,
        })
    }

    fn forward_trace(&self, relaxed: &Relaxed, x: &[f64], tau: f64) -> Trace {
        let t = self.threshold.width();
        let mut binarized = vec![0.0; self.binarized_width()];
        self.threshold
            .forward_into(x, tau, self.config.ste.threshold, &mut binarized[..t]);
        for (slot, &j) in binarized[t..].iter_mut().zip(&self.bit_inputs) {
            *slot = x[j];
        }
        let mut inputs = Vec::with_capacity(self.logic_layers.len());
        let mut ab = Vec::with_capacity(self.logic_layers.len());
        let mut cur = binarized.clone();
        for (l, layer) in self.logic_layers.iter().enumerate() {
            if l > 0 && self.config.concat_input {
                cur.extend_from_slice(&binarized);
            }
            let mut out = vec![0.0; layer.out_width];
            let mut pairs = vec![(0.0, 0.0); layer.out_width];
            layer.forward_into(&relaxed.logic[l], &cur, &mut out, &mut pairs);
            inputs.push(cur);
            ab.push(pairs);
            cur = out;
        }
        let mut scores = vec![0.0; self.num_classes()];
        self.sum.forward_into(&relaxed.sum, &cur, &mut scores);
        Trace {
            inputs,
            ab,
            last: cur,
            scores,
        }
    }

    /// Relaxed forward pass; STE layers contribute their discrete values.
    pub fn soft_predict(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.check_input(x)?;
        check_tau(tau)?;
        Ok(self.forward_trace(&self.relaxed(tau)?, x, tau).scores)
    }

    /// Mean cross-entropy over `indices` of `data` and its exact gradient
    /// with respect to every trainable tensor.
    pub fn loss_and_gradients(
        &self,
        data: &FeatureMatrix,
        indices: &[usize],
        tau: f64,
    ) -> Result<(f64, ModelGrads)> {
        check_tau(tau)?;
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let relaxed = self.relaxed(tau)?;
        let mut logic_acc: Vec<LogicAccum> = self
            .logic_layers
            .iter()
            .zip(&relaxed.logic)
            .map(|(l, r)| l.new_accum(r))
            .collect();
        let mut sum_acc = vec![0.0; self.sum.link_weights.len()];
        let mut thr = ThresholdGrads::zeros(self.threshold.width());
        let scale = 1.0 / indices.len() as f64;
        let t = self.threshold.width();
        let binarized_width = self.binarized_width();
        let mut total = 0.0;
        let mut g_scores = vec![0.0; self.num_classes()];

        for &i in indices {
            let x = &data.rows[i];
            self.check_input(x)?;
            let label = data.labels[i];
            if label >= self.num_classes() {
                return Err(Error::Range(format!("label {label}")));
            }
            let trace = self.forward_trace(&relaxed, x, tau);
            total += cross_entropy_grad(&trace.scores, label, Some(&mut g_scores));
            g_scores.iter_mut().for_each(|g| *g *= scale);

            let mut g_cur = vec![0.0; self.sum.in_width];
            self.sum.accumulate_backward(
                &relaxed.sum,
                &trace.last,
                &g_scores,
                &mut sum_acc,
                Some(&mut g_cur),
            );
            let mut g_binarized = vec![0.0; binarized_width];
            for l in (0..self.logic_layers.len()).rev() {
                let layer = &self.logic_layers[l];
                let mut g_in = vec![0.0; layer.in_width];
                layer.accumulate_backward(
                    &relaxed.logic[l],
                    &trace.inputs[l],
                    &trace.ab[l],
                    &g_cur,
                    &mut logic_acc[l],
                    Some(&mut g_in),
                );
                if l == 0 {
                    g_binarized
                        .iter_mut()
                        .zip(&g_in)
                        .for_each(|(a, b)| *a += b);
                } else {
                    let prev = self.logic_layers[l - 1].out_width;
                    if self.config.concat_input {
                        g_binarized
                            .iter_mut()
                            .zip(&g_in[prev..])
                            .for_each(|(a, b)| *a += b);
                    }
                    g_in.truncate(prev);
                }
                g_cur = g_in;
            }
            self.threshold
                .accumulate_backward(x, tau, &g_binarized[..t], &mut thr, None);
        }

        let logic = self
            .logic_layers
            .iter()
            .zip(&relaxed.logic)
            .zip(&logic_acc)
            .map(|((l, r), a)| l.finish(r, a))
            .collect();
        let sum = self.sum.finish(&relaxed.sum, &sum_acc);
        Ok((
            total * scale,
            ModelGrads {
                threshold: thr,
                logic,
                sum,
            },
        ))
    }

    /// Every trainable tensor with its parameter group, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Vec<f64>)> {
        use ParamGroup::*;
        let mut v: Vec<(ParamGroup, &mut Vec<f64>)> = vec![
            (Function, &mut self.threshold.bias),
            (Function, &mut self.threshold.slope),
        ];
        for l in &mut self.logic_layers {
            v.push((Function, &mut l.gate_weights));
            v.push((Connection, &mut l.link_a_weights));
            v.push((Connection, &mut l.link_b_weights));
        }
        v.push((Connection, &mut self.sum.link_weights));
        v
    }

    /// Mini-batch Adam over the relaxed network with an annealed
    /// temperature. In two-phase mode even epochs update function
    /// parameters only and odd epochs connection parameters only.
    pub fn train(&mut self, data: &FeatureMatrix) -> Result<Vec<EpochRecord>> {
        self.config.validate()?;
        self.validate()?;
        if data.num_rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if data.num_columns() != self.num_features() {
            return Err(Error::Structure(format!(
                "data has {} columns, model expects {}",
                data.num_columns(),
                self.num_features()
            )));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut adam = Adam::new(cfg.learning_rate, &mut *self);
        let mut order: Vec<usize> = (0..data.num_rows()).collect();
        let batch = cfg.batch_size.min(order.len());
        let mut history = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            let tau = cfg.tau_at(epoch);
            let active = if cfg.phase_unified {
                None
            } else if epoch % 2 == 0 {
                Some(ParamGroup::Function)
            } else {
                Some(ParamGroup::Connection)
            };
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for (b, chunk) in order.chunks(batch).enumerate() {
                let (loss, grads) = self.loss_and_gradients(data, chunk, tau)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        loss,
                    });
                }
                epoch_loss += loss * chunk.len() as f64;
                adam.step(self, &grads, active);
            }
            history.push(EpochRecord {
                epoch,
                tau,
                loss: epoch_loss / data.num_rows() as f64,
            });
            self.final_tau = tau;
        }
        Ok(history)
    }

    pub fn save(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Envelope<'a> {
            format: &'static str,
            version: u64,
            model: &'a DlnModel,
        }
        let mut out = serde_json::to_vec_pretty(&Envelope {
            format: MODEL_FORMAT_NAME,
            version: MODEL_FORMAT_VERSION,
            model: self,
        })
        .map_err(|e| Error::Structure(format!("cannot encode model: {e}")))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u64,
        }
        #[derive(Deserialize)]
        struct Envelope {
            model: DlnModel,
        }
        let header: Header = serde_json::from_slice(bytes).map_err(|e| json_error(bytes, &e))?;
        if header.format != MODEL_FORMAT_NAME {
            return Err(Error::Parse {
                offset: 0,
                line: 1,
                column: 1,
                message: format!("not a model file (format {:?})", header.format),
            });
        }
        if header.version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let env: Envelope = serde_json::from_slice(bytes).map_err(|e| json_error(bytes, &e))?;
        env.model.validate()?;
        Ok(env.model)
    }
}

fn json_error(bytes: &[u8], e: &serde_json::Error) -> Error {
    let (line, column) = (e.line(), e.column());
    let offset = if line == 0 {
        0
    } else {
        let line_start: usize = bytes
            .split(|&b| b == b'\n')
            .take(line - 1)
            .map(|l| l.len() + 1)
            .sum();
        (line_start + column.saturating_sub(1)).min(bytes.len())
    };
    Error::Parse {
        offset,
        line,
        column,
        message: e.to_string(),
    }
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with per-tensor moment estimates and step counters, so frozen
/// tensors in two-phase training keep both their values and their state.
struct Adam {
    lr: f64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    fn new(lr: f64, model: &mut DlnModel) -> Self {
        Adam {
            lr,
            slots: model
                .tensors_mut()
                .into_iter()
                .map(|(_, t)| AdamSlot {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                    t: 0,
                })
                .collect(),
        }
    }

    fn step(&mut self, model: &mut DlnModel, grads: &ModelGrads, active: Option<ParamGroup>) {
        let lr = self.lr;
        for (((group, params), g), slot) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.slots)
        {
            if active.map_or(false, |a| a != group) {
                continue;
            }
            slot.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(slot.t);
            let c2 = 1.0 - ADAM_BETA2.powi(slot.t);
            for i in 0..params.len() {
                slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g[i];
                slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                params[i] -= lr * (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}
