//! Mini-batch SGD with momentum, and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::network::{softmax_xent, Grads, Mode, Network, ParamGrads, ParamSelect};
use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    /// Divide the learning rate by `lr_drop_factor` every this many epochs.
    pub lr_drop_every: usize,
    pub lr_drop_factor: f32,
}

impl SgdConfig {
    /// The schedule used for SSR solving: lr 0.001 dropped 10× every 10
    /// epochs, momentum 0.9, weight decay 0.0005, batch 256.
    pub fn solver_default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 256,
            lr_drop_every: 10,
            lr_drop_factor: 10.0,
        }
    }

    /// Fine-tuning after pruning: lr 1e-4, scaled by 0.1 every 10 epochs.
    pub fn finetune_default() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::solver_default()
        }
    }

    /// Baseline LeNet training from scratch.
    pub fn lenet_baseline() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            lr_drop_every: 4,
            lr_drop_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return input_err("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return input_err("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return input_err("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 || self.lr_drop_every == 0 {
            return input_err("batch_size and lr_drop_every must be positive");
        }
        if !(self.lr_drop_factor > 0.0) {
            return input_err("lr_drop_factor must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based). Stays positive.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = (epoch / self.lr_drop_every) as i32;
        (self.learning_rate / self.lr_drop_factor.powi(drops)).max(f32::MIN_POSITIVE)
    }
}

/// Momentum buffers for one network shape.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Option<ParamGrads<f32>>>,
}

impl Sgd {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: Grads::zeros_like(net).layers,
        }
    }

    /// One momentum step:
    /// `v ← μ·v + lr·(g + wd·w + extra)`, `w ← w − v`.
    ///
    /// Weight decay applies to conv/fc weights only. `extra` is added to the
    /// weight gradient before the momentum update. Layers whose gradient is
    /// `None` are left untouched.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &Grads,
        cfg: &SgdConfig,
        lr: f32,
        extra: Option<&Grads>,
    ) -> Result<()> {
        if grads.layers.len() != net.params().len() || self.velocity.len() != net.params().len() {
            return Err(Error::Shape("gradient / optimizer layout does not match network".into()));
        }
        let mu = cfg.momentum;
        for (l, param) in net.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads.layers[l] else { continue };
            let decay = if param.decays() { cfg.weight_decay } else { 0.0 };
            let Some((w, b)) = param.trainable_mut() else { continue };
            let Some(v) = self.velocity[l].as_mut() else { continue };
            if g.weight.len() != w.len() || g.bias.len() != b.len() {
                return Err(Error::Shape(format!("gradient shape mismatch at layer {l}")));
            }
            let ex = extra.and_then(|e| e.layers.get(l)).and_then(Option::as_ref);
            for k in 0..w.len() {
                let mut grad = g.weight[k] + decay * w[k];
                if let Some(ex) = ex {
                    grad += ex.weight[k];
                }
                v.weight[k] = mu * v.weight[k] + lr * grad;
                w[k] -= v.weight[k];
            }
            for k in 0..b.len() {
                let mut grad = g.bias[k];
                if let Some(ex) = ex {
                    grad += ex.bias.get(k).copied().unwrap_or(0.0);
                }
                v.bias[k] = mu * v.bias[k] + lr * grad;
                b[k] -= v.bias[k];
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over the batch and the gradients of every parameter.
pub fn loss_and_grads(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<(f32, Grads)> {
    let (logits, acts) = net.forward(batch, Mode::Train)?;
    let (loss, dlogits) = softmax_xent(&logits, labels)?;
    let (grads, _) = net.backward(&acts, &dlogits, ParamSelect::All, false)?;
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1_error: f64,
    pub mean_loss: f64,
}

/// Top-1 error and mean loss in inference mode.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return input_err("cannot evaluate on an empty dataset");
    }
    let mut wrong = 0usize;
    let mut loss_sum = 0.0f64;
    for idx in data.batches(500, None) {
        let (x, y) = data.batch(&idx)?;
        let logits = net.predict(&x)?;
        let (loss, _) = softmax_xent(&logits, &y)?;
        loss_sum += loss as f64 * idx.len() as f64;
        for (r, &label) in y.iter().enumerate() {
            let row = logits.row(r);
            let pred = argmax(row);
            if pred != label {
                wrong += 1;
            }
        }
    }
    Ok(Evaluation {
        top1_error: wrong as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
    })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// One pass over `data` in a fresh permutation.
///
/// `select` restricts which layers receive updates; the data-loss gradient
/// still flows through the whole network.
pub fn train_epoch(
    net: &mut Network,
    sgd: &mut Sgd,
    data: &Dataset,
    cfg: &SgdConfig,
    lr: f32,
    rng: &mut ChaCha8Rng,
    select: ParamSelect,
) -> Result<f64> {
    let mut loss_sum = 0.0f64;
    for idx in data.batches(cfg.batch_size, Some(rng)) {
        let (x, y) = data.batch(&idx)?;
        let (logits, acts) = net.forward(&x, Mode::Train)?;
        let (loss, dlogits) = softmax_xent(&logits, &y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss}")));
        }
        let (grads, _) = net.backward(&acts, &dlogits, select, false)?;
        net.update_running_stats(&acts);
        sgd.step(net, &grads, cfg, lr, None)?;
        loss_sum += loss as f64 * idx.len() as f64;
    }
    Ok(loss_sum / data.len().max(1) as f64)
}

/// Runs `epochs` epochs with the step schedule of `cfg`. The callback sees
/// `(epoch, mean training loss)` after each one.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    cfg: &SgdConfig,
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() && epochs > 0 {
        return input_err("cannot train on an empty dataset");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(net);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = train_epoch(net, &mut sgd, data, cfg, cfg.lr_at(epoch), &mut rng, ParamSelect::All)?;
        on_epoch(epoch, loss);
        losses.push(loss);
    }
    Ok(losses)
}
