//! Head training against a class memory with focal-weighted binary
//! cross-entropy.
//!
//! Only the BN-FC-BN head is trained here; feature maps are fixed inputs.
//! Every sample in a batch is scored against every class memory slot, giving
//! `b × c` pairs that form one batch-norm batch. Row `i * c + j` of that
//! batch is the pair (sample `i`, class `j`).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{precondition, profile_mismatch, Result};
use crate::matching::{qaconv_raw_similarity, HeadParams, HeadTrace, Mode};
use crate::tensor::{FeatureMap, NORM_EPS};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateMode {
    /// Replace the slot with the latest sample of the class.
    Direct,
    /// `slot ← decay · slot + (1 − decay) · sample`.
    Ema { decay: f32 },
}

/// `c` cached feature maps, one per training class, initially zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMemory {
    slots: Vec<FeatureMap>,
}

impl ClassMemory {
    pub fn new(classes: usize, d: usize, h: usize, w: usize) -> Self {
        Self { slots: vec![FeatureMap::zeros(d, h, w); classes] }
    }

    pub fn classes(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[FeatureMap] {
        &self.slots
    }

    pub fn slot(&self, class: usize) -> &FeatureMap {
        &self.slots[class]
    }

    /// Writes a batch into memory in batch order, so within a batch the last
    /// occurrence of a class wins. Nothing is written if any label is out of
    /// range.
    pub fn update(&mut self, batch: &[FeatureMap], labels: &[usize], mode: UpdateMode) -> Result<()> {
        if batch.len() != labels.len() {
            return profile_mismatch(format!("{} samples but {} labels", batch.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.slots.len()) {
            return precondition(format!("label {bad} outside [0, {})", self.slots.len()));
        }
        if let Some(first) = self.slots.first() {
            if let Some(m) = batch.iter().find(|m| m.profile() != first.profile()) {
                return profile_mismatch(format!("sample profile {:?} vs memory {:?}", m.profile(), first.profile()));
            }
        }
        for (fm, &label) in batch.iter().zip(labels) {
            match mode {
                UpdateMode::Direct => self.slots[label] = fm.clone(),
                UpdateMode::Ema { decay } => {
                    let slot = self.slots[label].data_mut();
                    for (m, &x) in slot.iter_mut().zip(fm.data()) {
                        *m = decay * *m + (1.0 - decay) * x;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Focusing parameter of the focal weight `(1 − p̂)^γ`.
    pub gamma: f64,
    pub lr: f64,
    pub lr_decay: f64,
    /// First epoch (0-based) trained at the decayed rate.
    pub decay_epoch: usize,
    pub epochs: usize,
    pub update_mode: UpdateMode,
    pub kernel_size: usize,
    /// Batch-norm running-statistics momentum.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            gamma: 2.0,
            lr: 0.01,
            lr_decay: 0.1,
            decay_epoch: 40,
            epochs: 60,
            update_mode: UpdateMode::Direct,
            kernel_size: 1,
            momentum: crate::matching::DEFAULT_MOMENTUM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return precondition(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.gamma >= 0.0) {
            return precondition(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return precondition("learning rate and decay must be positive");
        }
        if self.epochs == 0 {
            return precondition("epochs must be positive");
        }
        if let UpdateMode::Ema { decay } = self.update_mode {
            if !(decay > 0.0 && decay < 1.0) {
                return precondition(format!("ema decay must lie in (0, 1), got {decay}"));
            }
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return precondition(format!("momentum must lie in (0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

#[inline]
fn is_positive(pair: usize, classes: usize, labels: &[usize]) -> bool {
    labels[pair / classes] == pair % classes
}

fn check_pairs(n_pairs: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if classes == 0 || n_pairs != labels.len() * classes {
        return profile_mismatch(format!(
            "{n_pairs} pair scores do not form {} samples x {classes} classes",
            labels.len()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return precondition(format!("label {bad} outside [0, {classes})"));
    }
    Ok(())
}

/// Focal-weighted binary cross-entropy over a `b × c` probability table
/// (row-major), normalized by `b`.
pub fn focal_bce_loss(probs: &[f64], classes: usize, labels: &[usize], gamma: f64) -> Result<f64> {
    check_pairs(probs.len(), classes, labels)?;
    let total: f64 = probs
        .iter()
        .enumerate()
        .map(|(n, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let q = if is_positive(n, classes, labels) { p } else { 1.0 - p };
            -(1.0 - q).powf(gamma) * q.ln()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradients of the focal loss with respect to the trainable head fields.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub bn1_scale: Vec<f64>,
    pub bn1_shift: Vec<f64>,
    pub fc_weight: Vec<f64>,
    pub fc_bias: f64,
    pub bn2_scale: f64,
    pub bn2_shift: f64,
}

impl HeadGradients {
    /// All components in a fixed order: bn1 scale, bn1 shift, fc weight,
    /// fc bias, bn2 scale, bn2 shift.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.fc_weight.len() + 3);
        v.extend(&self.bn1_scale);
        v.extend(&self.bn1_shift);
        v.extend(&self.fc_weight);
        v.extend([self.fc_bias, self.bn2_scale, self.bn2_shift]);
        v
    }
}

/// Loss and exact gradients for one batch of pooled pair vectors, with batch
/// statistics differentiated as functions of the batch.
pub fn head_backward(
    batch: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    head: &HeadParams,
    gamma: f64,
) -> Result<(f64, HeadGradients)> {
    check_pairs(batch.len(), classes, labels)?;
    if batch.len() < 2 {
        return precondition("backward needs at least 2 pairs");
    }
    if let Some(v) = batch.iter().find(|v| v.len() != head.n_features()) {
        return profile_mismatch(format!("head expects {} features, got {}", head.n_features(), v.len()));
    }
    let trace = head.trace(batch);
    backward_from_trace(&trace, labels, classes, head, gamma)
}

fn backward_from_trace(
    trace: &HeadTrace,
    labels: &[usize],
    classes: usize,
    head: &HeadParams,
    gamma: f64,
) -> Result<(f64, HeadGradients)> {
    let loss = focal_bce_loss(&trace.probabilities, classes, labels, gamma)?;
    let b = labels.len() as f64;
    let n = trace.probabilities.len();
    let nf = head.n_features();

    // d loss / d (pre-sigmoid output of bn2)
    let d_out: Vec<f64> = trace
        .probabilities
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let positive = is_positive(k, classes, labels);
            let q = if positive { p } else { 1.0 - p };
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
                return 0.0;
            }
            let focal_term = if gamma == 0.0 { 0.0 } else { gamma * (1.0 - q).powf(gamma - 1.0) * q.ln() };
            let d_q = (focal_term - (1.0 - q).powf(gamma) / q) / b;
            let dq_dout = if positive { p * (1.0 - p) } else { -p * (1.0 - p) };
            d_q * dq_dout
        })
        .collect();

    let bn2_scale = head.bn2.scale[0];
    let bn2_shift_grad: f64 = d_out.iter().sum();
    let bn2_scale_grad: f64 = d_out.iter().zip(&trace.logit_normalized).map(|(g, x)| g * x).sum();
    let d_logit = batch_norm_input_grad(
        &d_out.iter().map(|g| g * bn2_scale).collect::<Vec<_>>(),
        &trace.logit_normalized,
        trace.bn2_inv_std,
    );

    let fc_bias = d_logit.iter().sum();
    let mut fc_weight = vec![0.0; nf];
    let mut bn1_scale = vec![0.0; nf];
    let mut bn1_shift = vec![0.0; nf];
    for (row, &g) in trace.normalized.iter().zip(&d_logit) {
        for k in 0..nf {
            let xh = row[k];
            fc_weight[k] += g * (xh * head.bn1.scale[k] + head.bn1.shift[k]);
            let d_y1 = g * head.fc_weight[k];
            bn1_scale[k] += d_y1 * xh;
            bn1_shift[k] += d_y1;
        }
    }
    debug_assert_eq!(trace.normalized.len(), n);
    Ok((
        loss,
        HeadGradients { bn1_scale, bn1_shift, fc_weight, fc_bias, bn2_scale: bn2_scale_grad, bn2_shift: bn2_shift_grad },
    ))
}

/// Gradient through `x̂ = (x − mean) · inv_std` given `d x̂`.
fn batch_norm_input_grad(d_normalized: &[f64], normalized: &[f64], inv_std: f64) -> Vec<f64> {
    let n = d_normalized.len() as f64;
    let sum: f64 = d_normalized.iter().sum();
    let dot: f64 = d_normalized.iter().zip(normalized).map(|(g, x)| g * x).sum();
    d_normalized
        .iter()
        .zip(normalized)
        .map(|(g, x)| inv_std / n * (n * g - sum - x * dot))
        .collect()
}

/// Plain SGD step on the trainable head fields.
pub fn sgd_step(head: &mut HeadParams, grads: &HeadGradients, lr: f64) {
    for (p, g) in head.bn1.scale.iter_mut().zip(&grads.bn1_scale) {
        *p -= lr * g;
    }
    for (p, g) in head.bn1.shift.iter_mut().zip(&grads.bn1_shift) {
        *p -= lr * g;
    }
    for (p, g) in head.fc_weight.iter_mut().zip(&grads.fc_weight) {
        *p -= lr * g;
    }
    head.fc_bias -= lr * grads.fc_bias;
    head.bn2.scale[0] -= lr * grads.bn2_scale;
    head.bn2.shift[0] -= lr * grads.bn2_shift;
}

/// Pooled vectors of every (sample, memory slot) pair, sample-major.
pub fn memory_pairs(samples: &[&FeatureMap], memory: &ClassMemory, s: usize) -> Result<Vec<Vec<f64>>> {
    let c = memory.classes();
    (0..samples.len() * c)
        .into_par_iter()
        .map(|k| {
            let pooled = qaconv_raw_similarity(samples[k / c], memory.slot(k % c), s)?;
            Ok(pooled.values.iter().map(|&v| f64::from(v)).collect())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Trained head, switched to eval mode.
    pub head: HeadParams,
    pub memory: ClassMemory,
    /// `(epoch, mean batch loss)` for every epoch.
    pub loss_trace: Vec<(usize, f64)>,
}

/// Trains the head with SGD on fixed feature maps. Maps are l2-normalized
/// on entry. Deterministic for a given `seed`.
pub fn train_head(
    features: &[FeatureMap],
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if classes < 2 {
        return precondition(format!("training needs at least 2 classes, got {classes}"));
    }
    if features.is_empty() || features.len() != labels.len() {
        return profile_mismatch(format!("{} feature maps but {} labels", features.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return precondition(format!("label {bad} outside [0, {classes})"));
    }
    let (d, h, w) = features[0].profile();
    if let Some(m) = features.iter().find(|m| m.profile() != (d, h, w)) {
        return profile_mismatch(format!("feature profile {:?} vs {:?}", m.profile(), (d, h, w)));
    }
    let features: Vec<FeatureMap> = features.iter().map(|m| m.l2_normalize_channels(NORM_EPS)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = HeadParams::init(2 * h * w, seed ^ 0x9e37_79b9_7f4a_7c15);
    head.momentum = cfg.momentum;
    let mut memory = ClassMemory::new(classes, d, h, w);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&FeatureMap> = chunk.iter().map(|&k| &features[k]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&k| labels[k]).collect();
            let pairs = memory_pairs(&samples, &memory, cfg.kernel_size)?;
            let trace = head.forward_train(&pairs)?;
            let (loss, grads) = backward_from_trace(&trace, &batch_labels, classes, &head, cfg.gamma)?;
            sgd_step(&mut head, &grads, lr);
            // memory is written only after the loss of this batch is taken
            let owned: Vec<FeatureMap> = samples.into_iter().cloned().collect();
            memory.update(&owned, &batch_labels, cfg.update_mode)?;
            epoch_loss += loss;
            batches += 1;
        }
        loss_trace.push((epoch, epoch_loss / batches as f64));
    }
    head.mode = Mode::Eval;
    Ok(TrainOutcome { head, memory, loss_trace })
}

/// Fraction of samples whose highest-probability memory slot is their own
/// class (eval-mode head, ties to the lower class index).
pub fn training_accuracy(
    head: &HeadParams,
    memory: &ClassMemory,
    features: &[FeatureMap],
    labels: &[usize],
    s: usize,
) -> Result<f64> {
    let normalized: Vec<FeatureMap> = features.iter().map(|m| m.l2_normalize_channels(NORM_EPS)).collect();
    let refs: Vec<&FeatureMap> = normalized.iter().collect();
    let pairs = memory_pairs(&refs, memory, s)?;
    let c = memory.classes();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..c {
            let p = head.probability(&pairs[i * c + j]);
            if p > best.0 {
                best = (p, j);
            }
        }
        correct += usize::from(best.1 == label);
    }
    Ok(correct as f64 / labels.len() as f64)
}
