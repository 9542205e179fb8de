//! Adam with L2 weight decay, a plateau learning-rate schedule and the
//! mini-batch training loop.

use std::collections::HashMap;

use nlcen_tensor::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, batch_tensor, SampleRecord};
use crate::error::{Error, Result};
use crate::layers::{apply_batch_stats, is_nlce_param, ForwardCtx};
use crate::metrics::{confusion, mean_scores};
use crate::segnet::{argmax_masks, training_loss, Nlcen};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One update of every `(name, gradient)` pair. Weight decay is added
    /// to the gradient (L2 penalty), not decoupled.
    pub fn step<'a>(&mut self, store: &mut ParamStore, grads: impl IntoIterator<Item = (&'a str, Tensor)>) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, grad) in grads {
            let Some(p) = store.tensor_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + self.weight_decay * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a new best loss, never going below `floor`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(factor: f64, patience: usize, floor: f64) -> Self {
        PlateauSchedule {
            factor,
            patience,
            floor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return (lr * self.factor).max(self.floor);
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            lr_decay: 0.9,
            lr_floor: 1e-4,
            patience: 3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            augment: false,
            seed: 0,
        }
    }
}

/// Which parameters a training run may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    All,
    /// Only `nlce*` parameters update; the base network runs in inference
    /// mode so its batch-norm statistics stay fixed as well.
    FrozenBase,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dic: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,loss,dic,lr";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.epoch, r.loss, r.dic, r.lr));
    }
    out
}

/// Trains `params` in place and returns one log row per epoch. The loss is
/// the mean over batches of the weighted level and refined losses; DIC is
/// measured on the refined training predictions.
pub fn train(
    net: &Nlcen,
    params: &mut ParamStore,
    samples: &[SampleRecord],
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<Vec<EpochLog>> {
    if cfg.epochs > 0 && samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    net.check_params(params)?;
    let ctx = match mode {
        TrainMode::All => ForwardCtx::TRAIN,
        TrainMode::FrozenBase => ForwardCtx::FROZEN_BASE,
    };
    let updatable = |name: &str| mode == TrainMode::All || is_nlce_param(name);
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut schedule = PlateauSchedule::new(cfg.lr_decay, cfg.patience, cfg.lr_floor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = adam.lr;
        let (mut loss_sum, mut batches, mut counts) = (0.0, 0usize, Vec::new());
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Batch norm needs two values per channel at the coarsest stage.
            if chunk.len() < 2 && samples.len() >= 2 {
                continue;
            }
            let batch: Vec<SampleRecord> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let seed = cfg.seed ^ ((epoch as u64) << 32) ^ i as u64;
                        augment(&samples[i], seed)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let masks: Vec<&[u8]> = batch.iter().map(|s| s.mask.data.as_slice()).collect();

            let mut g = Graph::new();
            let x = g.constant(batch_tensor(&images)?);
            let out = net.forward(&mut g, params, x, ctx)?;
            let loss = training_loss(&mut g, &out, &masks)?;
            let value = g.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grads = g.backward(loss)?;
            let updates: Vec<(&str, Tensor)> = grads.params().filter(|(n, _)| updatable(n)).collect();
            adam.step(params, updates);
            apply_batch_stats(params, &g.take_batch_stats());

            for (pred, gt) in argmax_masks(g.value(out.refined)).iter().zip(&masks) {
                counts.push(confusion(pred, gt)?);
            }
            loss_sum += value;
            batches += 1;
        }
        let loss = loss_sum / batches.max(1) as f64;
        let (dic, _) = mean_scores(&counts);
        log.push(EpochLog { epoch, loss, dic, lr });
        log::info!("epoch {epoch}: loss {loss:.4} dic {dic:.4} lr {lr:.2e}");
        adam.lr = schedule.observe(loss, lr);
    }
    Ok(log)
}
