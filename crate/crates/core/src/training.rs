//! Cross-entropy loss, Adam with inverse-time decay, and the mini-batch
//! training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::architectures::{Model, CLASSES};
use crate::datapipe::Sample;
use crate::error::{Error, Result};
use crate::layers::{Mode, Param};
use crate::tensor::{softmax_rows, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

/// `−Σ target·ln(probs)` with probabilities clamped to `[1e-12, 1]`.
pub fn cross_entropy(probs: &Tensor, target: &Tensor) -> Result<f64> {
    if probs.shape() != target.shape() {
        return Err(Error::dim(format!(
            "cross entropy: probs {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    Ok(row_cross_entropy(probs.data(), target.data()))
}

fn row_cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    -p.iter()
        .zip(y)
        .map(|(&p, &y)| if y == 0.0 { 0.0 } else { y * p.clamp(PROB_FLOOR, 1.0).ln() })
        .sum::<f64>()
}

/// Mean cross entropy over a batch of logits `[B × K]` and the gradient of
/// that mean with respect to the logits, `(softmax − target) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() || logits.rank() != 2 {
        return Err(Error::dim(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let [b, k] = *logits.shape() else { unreachable!() };
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (p, y) in probs.data().chunks_exact(k).zip(targets.data().chunks_exact(k)) {
        loss += row_cross_entropy(p, y);
        grad.extend(p.iter().zip(y).map(|(p, y)| (p - y) / b as f64));
    }
    Ok((loss / b as f64, Tensor::new(&[b, k], grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameters plus the shared step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Completed updates.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &[(Tensor, Tensor)] {
        &self.moments
    }

    /// Rate applied by the next update: `lr / (1 + decay·t)`.
    pub fn learning_rate(&self) -> f64 {
        self.config.lr / (1.0 + self.config.decay * self.t as f64)
    }

    /// One Adam step over every `(value, grad)` pair. The i-th pair always
    /// maps to the i-th moment slot.
    pub fn update(&mut self, pairs: &mut [(&mut Tensor, &Tensor)]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = pairs
                .iter()
                .map(|(v, _)| (Tensor::zeros(v.shape()), Tensor::zeros(v.shape())))
                .collect();
        }
        if self.moments.len() != pairs.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {}",
                self.moments.len(),
                pairs.len()
            )));
        }
        for ((value, grad), (m, _)) in pairs.iter().zip(&self.moments) {
            if value.shape() != grad.shape() || value.shape() != m.shape() {
                return Err(Error::dim(format!(
                    "adam: param {:?}, grad {:?}, moment {:?}",
                    value.shape(),
                    grad.shape(),
                    m.shape()
                )));
            }
        }
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let lr_t = self.learning_rate();
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((value, grad), (m, v)) in pairs.iter_mut().zip(&mut self.moments) {
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn update_params(&mut self, params: &mut [Param<'_>]) -> Result<()> {
        let mut pairs: Vec<(&mut Tensor, &Tensor)> =
            params.iter_mut().map(|p| (&mut *p.value, &*p.grad)).collect();
        self.update(&mut pairs)
    }
}

/// Single-tensor Adam step.
pub fn adam_update(state: &mut AdamState, param: &mut Tensor, grad: &Tensor) -> Result<()> {
    state.update(&mut [(param, grad)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of clips kept for training.
    pub split: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Weights each training unit by `n / (2·n_class)`.
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 1000,
            split: 0.9,
            seed: 0,
            adam: AdamConfig::default(),
            balance_classes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split must lie in (0, 1), got {}", self.split)));
        }
        let a = self.adam;
        if !(a.lr > 0.0) || a.decay < 0.0 || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Clip ids held out for validation.
    pub validation_ids: Vec<String>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, val);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Every frame of a clip gets the clip's label.
pub fn replicate_frame_labels(label: &Tensor, frames: usize) -> Vec<Tensor> {
    vec![label.clone(); frames]
}

/// Seeded, class-stratified split of sample indices into (train, validation).
///
/// Each class keeps `round((1 − split)·n_c)` samples for validation, at least
/// one when `n_c ≥ 2` and never all of them.
pub fn stratified_split(samples: &[Sample], split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for risky in [false, true] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].is_risky() == risky).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = if n < 2 {
            0
        } else {
            (((1.0 - split) * n as f64).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Training units for a model: whole sequences, or individual frames with
/// replicated labels for frame-level models.
pub fn training_units(model: &Model, samples: &[&Sample]) -> Result<Vec<(Tensor, Tensor)>> {
    let want = model.sample_shape();
    let mut out = Vec::new();
    for s in samples {
        if model.is_frame_level() {
            if s.x.rank() != want.len() + 1 || s.x.shape()[1..] != want[..] {
                return Err(Error::dim(format!(
                    "clip {} has shape {:?}, model frames are {want:?}",
                    s.clip_id,
                    s.x.shape()
                )));
            }
            let t = s.x.shape()[0];
            let labels = replicate_frame_labels(&s.y, t);
            for (j, y) in labels.into_iter().enumerate() {
                out.push((Tensor::new(&want, s.x.outer(j).to_vec())?, y));
            }
        } else {
            if s.x.shape() != want.as_slice() {
                return Err(Error::dim(format!(
                    "clip {} has shape {:?}, model takes {want:?}",
                    s.clip_id,
                    s.x.shape()
                )));
            }
            out.push((s.x.clone(), s.y.clone()));
        }
    }
    Ok(out)
}

/// Scales each one-hot target by its class weight `n / (2·n_class)`; the
/// softmax cross-entropy gradient then becomes `w·(p − y)`.
fn balance(units: &mut [(Tensor, Tensor)]) {
    let n = units.len() as f64;
    let risky = units.iter().filter(|(_, y)| y.data()[1] > y.data()[0]).count() as f64;
    let weights = [n / (2.0 * (n - risky)), n / (2.0 * risky)];
    for (_, y) in units {
        let w = weights[usize::from(y.data()[1] > y.data()[0])];
        *y = y.scale(w);
    }
}

fn stack_units(units: &[(Tensor, Tensor)], order: &[usize]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<&Tensor> = order.iter().map(|&i| &units[i].0).collect();
    let ys: Vec<&Tensor> = order.iter().map(|&i| &units[i].1).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

/// Accumulates the batch gradient and returns the mean loss. Parameter
/// gradients end up averaged over the batch.
pub fn batch_gradient(model: &mut Model, x: &Tensor, y: &Tensor, mode: Mode) -> Result<f64> {
    let logits = model.forward(x, mode)?;
    let (loss, grad) = softmax_cross_entropy(&logits, y)?;
    model.backward(&grad)?;
    Ok(loss)
}

/// Mean loss and argmax accuracy in inference mode.
pub fn evaluate(model: &mut Model, units: &[(Tensor, Tensor)], batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let order: Vec<usize> = (0..units.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = stack_units(units, chunk)?;
        let p = model.probabilities(&x)?;
        for (p, y) in p.data().chunks_exact(CLASSES).zip(y.data().chunks_exact(CLASSES)) {
            loss += row_cross_entropy(p, y);
            if (p[1] > p[0]) == (y[1] > y[0]) {
                correct += 1;
            }
        }
    }
    let n = units.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fits `model` in place. Returns the per-epoch history.
pub fn train(model: &mut Model, samples: &[Sample], config: &TrainConfig) -> Result<TrainHistory> {
    train_with(model, samples, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut Model,
    samples: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainHistory> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 samples, got {}", samples.len())));
    }
    let (train_idx, val_idx) = stratified_split(samples, config.split, config.seed);
    let has = |risky: bool| train_idx.iter().any(|&i| samples[i].is_risky() == risky);
    if !has(true) || !has(false) {
        return Err(Error::Config("training split holds a single class".into()));
    }
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let mut train_units = training_units(model, &train_set)?;
    if config.balance_classes {
        balance(&mut train_units);
    }
    let val_units = training_units(model, &val_set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005E_ED0F_7A1E);
    model.reseed(config.seed.wrapping_add(1));
    let mut adam = AdamState::new(config.adam);
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs),
        validation_ids: val_set.iter().map(|s| s.clip_id.clone()).collect(),
    };
    let mut order: Vec<usize> = (0..train_units.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = stack_units(&train_units, chunk)?;
            model.zero_grad();
            let loss = batch_gradient(model, &x, &y, Mode::Train)?;
            total += loss * chunk.len() as f64;
            adam.update_params(&mut model.params_mut())?;
        }
        model.clear_cache();
        let (val_loss, val_accuracy) = if val_units.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, &val_units, config.batch_size)?;
            (Some(l), Some(a))
        };
        let stats = EpochStats {
            epoch,
            train_loss: total / train_units.len() as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok(history)
}
