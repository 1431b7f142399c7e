//! Optimisation loop: freeze policies, AdamW with linear decay, gradient
//! clipping, few-shot fine-tuning and checkpoints.

mod checkpoint;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{LossConfig, PreBatchQueue};
use crate::model::{batch_step, Example, ModelError, TwoTowerModel};
use crate::numerics::{ParamId, ParamStore, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("unknown freeze policy {0:?}")]
    UnknownPolicy(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (lr {lr}, tau {tau})")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64, lr: f64, tau: f64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezePolicy {
    PrefixOnly,
    LastLayer,
    Last6Layers,
    FirstLayer,
    Full,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 5] =
        [FreezePolicy::PrefixOnly, FreezePolicy::LastLayer, FreezePolicy::Last6Layers, FreezePolicy::FirstLayer, FreezePolicy::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            FreezePolicy::PrefixOnly => "prefix_only",
            FreezePolicy::LastLayer => "last_layer",
            FreezePolicy::Last6Layers => "last_6_layers",
            FreezePolicy::FirstLayer => "first_layer",
            FreezePolicy::Full => "full",
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezePolicy {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        FreezePolicy::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| TrainError::UnknownPolicy(s.to_string()))
    }
}

/// Sets trainable flags: prefix banks and temperature always train; the
/// policy decides which backbone layers join them.
pub fn apply_freeze_policy(model: &mut TwoTowerModel, policy: FreezePolicy) {
    let store = &mut model.store;
    store.set_all_trainable(false);
    if policy == FreezePolicy::Full {
        store.set_all_trainable(true);
        return;
    }
    for id in model.query_bank.params().into_iter().chain(model.candidate_bank.params()) {
        store.set_trainable(id, true);
    }
    store.set_trainable(model.log_tau, true);
    let l = model.weights.layers.len();
    let layers = match policy {
        FreezePolicy::PrefixOnly | FreezePolicy::Full => 0..0,
        FreezePolicy::LastLayer => l - 1..l,
        FreezePolicy::Last6Layers => l.saturating_sub(6)..l,
        FreezePolicy::FirstLayer => 0..1,
    };
    for layer in &model.weights.layers[layers] {
        for id in layer.all() {
            store.set_trainable(id, true);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Cap on in-batch negatives per query; `None` uses all `B - 1`.
    pub max_in_batch: Option<usize>,
    /// Prefix-only steps on support facts in the few-shot protocol.
    pub finetune_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            freeze_policy: FreezePolicy::PrefixOnly,
            grad_clip: 10.0,
            weight_decay: 0.01,
            max_in_batch: None,
            finetune_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// `base * (1 - step / total)`.
pub fn linear_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64)
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let f = max_norm / norm;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.get(id).trainable() {
                store.get_mut(id).grad_mut().scale_assign(f);
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: HashMap::new() }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Decay applies only to parameters registered with `decay = true`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            let decay = if p.decay() { self.weight_decay } else { 0.0 };
            let g = p.grad().clone();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            let w = p.value_mut();
            for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *wi -= lr * (update + decay * *wi);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6}\t{:.6e}\t{:.6}", self.epoch, self.step, self.loss, self.lr, self.tau)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

/// Training state shared by full training and fine-tuning.
struct Loop<'a> {
    candidates: &'a [Vec<u32>],
    loss_cfg: &'a LossConfig,
    cfg: &'a TrainConfig,
    optimizer: AdamW,
    queue: PreBatchQueue,
}

impl Loop<'_> {
    fn step(&mut self, model: &mut TwoTowerModel, batch: &[&Example], lr: f64, epoch: usize, step: usize) -> Result<f64, TrainError> {
        let out = batch_step(model, batch, self.candidates, &self.queue, self.loss_cfg, self.cfg.max_in_batch)?;
        let non_finite = || TrainError::NonFiniteLoss { epoch, step, loss: out.loss, lr, tau: model.tau() };
        if !out.loss.is_finite() || out.grads.0.values().any(|g| !g.is_finite()) {
            return Err(non_finite());
        }
        model.store.zero_grad();
        model.store.accumulate(&out.grads);
        clip_grad_norm(&mut model.store, self.cfg.grad_clip);
        self.optimizer.step(&mut model.store, lr);
        model.clamp_tau(self.loss_cfg.tau_min);
        self.queue.push_batch(out.gold_embeddings, out.gold_ids);
        Ok(out.loss)
    }
}

/// Trains `model` on `examples` for `cfg.epochs` epochs. Freeze flags must
/// already be set. `on_epoch` runs after every epoch (logging, validation,
/// checkpoints) and may stop training early by returning `false`.
pub fn train<F>(
    model: &mut TwoTowerModel,
    examples: &[Example],
    candidates: &[Vec<u32>],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: F,
) -> Result<TrainReport, TrainError>
where
    F: FnMut(&TwoTowerModel, &EpochRecord) -> Result<bool, TrainError>,
{
    cfg.validate()?;
    loss_cfg.validate().map_err(ModelError::from)?;
    if examples.len() < 2 {
        return Err(TrainError::InvalidConfig("need at least two training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut lp = Loop { candidates, loss_cfg, cfg, optimizer: AdamW::new(cfg.weight_decay), queue: PreBatchQueue::new(loss_cfg.pre_batch_depth) };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let lr = linear_lr(cfg.learning_rate, step, total);
            sum += lp.step(model, &batch, lr, epoch, step)?;
            batches += 1;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            step,
            loss: sum / batches.max(1) as f64,
            lr: linear_lr(cfg.learning_rate, step, total),
            tau: model.tau(),
        };
        report.epochs.push(record.clone());
        report.steps = step;
        if !on_epoch(model, &record)? {
            break;
        }
    }
    Ok(report)
}

/// `steps` prefix-only updates cycling through `examples` in seeded order.
/// Returns the per-step losses.
pub fn fine_tune(
    model: &mut TwoTowerModel,
    examples: &[Example],
    candidates: &[Vec<u32>],
    steps: usize,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<f64>, TrainError> {
    if examples.len() < 2 || steps == 0 {
        return Ok(Vec::new());
    }
    apply_freeze_policy(model, FreezePolicy::PrefixOnly);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut lp = Loop { candidates, loss_cfg, cfg, optimizer: AdamW::new(cfg.weight_decay), queue: PreBatchQueue::new(loss_cfg.pre_batch_depth) };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let bs = cfg.batch_size.min(examples.len());
    let mut losses = Vec::with_capacity(steps);
    let mut cursor = order.len();
    for step in 0..steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&Example> = order[cursor..cursor + bs].iter().map(|&i| &examples[i]).collect();
        cursor += bs;
        losses.push(lp.step(model, &batch, linear_lr(cfg.learning_rate, step, steps), 0, step)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for p in FreezePolicy::ALL {
            assert_eq!(p.as_str().parse::<FreezePolicy>().unwrap(), p);
        }
        assert!(matches!("everything".parse::<FreezePolicy>(), Err(TrainError::UnknownPolicy(_))));
    }

    #[test]
    fn linear_decay_endpoints() {
        assert_eq!(linear_lr(1e-3, 0, 10), 1e-3);
        assert!((linear_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
        assert_eq!(linear_lr(1e-3, 10, 10), 0.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::zeros(1, 2), true);
        store.get_mut(id).grad_mut().data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!(store.grad_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.register("b", Tensor::row(&[1.0, -1.0]), false);
        store.get_mut(id).grad_mut().data_mut().copy_from_slice(&[0.5, -2.0]);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut store, 0.1);
        let v = store.get(id).value().data();
        // bias-corrected first step is lr * sign(g)
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }
}
