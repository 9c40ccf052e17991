//! AdamW training with step learning-rate decay and global-norm clipping.
//!
//! Samples of a batch run one after another and their gradients are summed
//! in batch order, so a run is a pure function of the model, data and
//! config.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::{Model, Prepared};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            decay: 0.1,
            decay_every: 15,
            batch_size: 4,
            weight_decay: 0.01,
            clip_norm: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lr) || !pos(self.decay) || self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning rate, decay, decay period and batch size must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("weight decay and clip norm must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !pos(self.adam_eps) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }

    /// `lr · decay^⌊epoch / decay_every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * math::pow(self.decay, (epoch / self.decay_every) as f64)
    }
}

/// Decoupled weight decay applies to tensors of rank ≥ 2 only; biases
/// are left alone.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - math::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - math::pow(cfg.beta2, self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((pv, &gv), mv), vv) in it {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let update = (*mv / bc1) / (math::sqrt(*vv / bc2) + cfg.adam_eps);
                *pv -= lr * (update + decay * *pv);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    math::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean total loss per epoch, measured during the epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean total loss of each optimizer step's batch.
    pub step_loss: Vec<f64>,
    pub lr: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub conf: f64,
    pub loc: f64,
}

/// Mean loss and mean gradient over `batch`.
pub fn batch_gradient(model: &Model, batch: &[&Prepared]) -> Result<(crate::detection::LossParts, Vec<Tensor>)> {
    let mut acc: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut parts = crate::detection::LossParts::default();
    let scale = 1.0 / batch.len() as f64;
    for input in batch {
        let (p, grads) = model.loss_and_grads(input)?;
        parts.conf += p.conf * scale;
        parts.loc += p.loc * scale;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y * scale;
            }
        }
    }
    Ok((parts, acc))
}

pub fn train(model: &mut Model, data: &[Prepared], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, data, cfg, |_| {})
}

/// Trains in place, calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut Model,
    data: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let mut opt = AdamW::new(model.store.tensors());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut conf, mut loc) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let (parts, mut grads) = batch_gradient(model, &batch)?;
            if !parts.total().is_finite() {
                return Err(Error::Contract(alloc::format!(
                    "loss became non-finite in epoch {epoch}"
                )));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(model.store.tensors_mut(), &grads, lr, cfg);
            let w = chunk.len() as f64;
            sum += parts.total() * w;
            conf += parts.conf * w;
            loc += parts.loc * w;
            log.step_loss.push(parts.total());
        }
        let n = data.len() as f64;
        let summary = EpochSummary {
            epoch,
            lr,
            loss: sum / n,
            conf: conf / n,
            loc: loc / n,
        };
        log.epoch_loss.push(summary.loss);
        log.lr.push(lr);
        on_epoch(&summary);
    }
    Ok(log)
}
