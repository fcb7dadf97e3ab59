//! Supervised source training of every dense parameter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{to_tensor, Dataset};
use crate::adapt::Adam;
use crate::error::{Error, Result};
use crate::model::{Probes, Trainability, ViTConfig, VisionTransformer};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Linear ramp from 0 before the cosine decay starts.
    pub warmup_steps: usize,
    /// Mass spread uniformly over all classes in the targets.
    pub label_smoothing: f64,
    /// Random contrast, brightness and pixel-noise jitter per image.
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 2e-3,
            batch_size: 64,
            seed: 0,
            warmup_steps: 100,
            label_smoothing: 0.1,
            augment: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "learning_rate",
                reason: "must be positive and finite".into(),
            });
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig {
                field: "label_smoothing",
                reason: "must lie in [0, 1)".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                field: "batch_size",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Linear warmup over `warmup` steps, then cosine decay to 0 at `total`.
pub fn cosine_lr(lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Mean cross-entropy of one batch and the gradient of every tensor.
fn loss_and_grad<T: Real>(
    model: &VisionTransformer<T>,
    images: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tr = model.trace(images, &Probes::default(), true)?;
    let g = &mut tr.graph;
    let classes = model.config().num_classes;
    let mut onehot = vec![smoothing / classes as f64; labels.len() * classes];
    for (i, l) in labels.iter().enumerate() {
        onehot[i * classes + l] += 1.0 - smoothing;
    }
    let onehot = g.constant(Tensor::from_f64([labels.len(), classes], &onehot)?);
    let logp = g.log_softmax(tr.logits);
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked);
    let loss = g.scale(total, T::lit(-1.0 / labels.len() as f64));
    let value = g.value(loss).item().as_f64();
    let params = tr.params;
    let grads = tr.graph.backward(loss)?;
    let mut flat = Vec::new();
    for p in params {
        flat.extend(grads.get_or_zeros(p).into_iter().map(|x| x.as_f64()));
    }
    Ok((value, flat))
}

fn flatten<T: Real>(model: &VisionTransformer<T>) -> Vec<f64> {
    model
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|x| x.as_f64()))
        .collect()
}

fn unflatten<T: Real>(model: &mut VisionTransformer<T>, flat: &[f64]) {
    let mut at = 0;
    model.visit_tensors_mut(|_, t| {
        for x in t.data_mut() {
            *x = T::lit(flat[at]);
            at += 1;
        }
    });
}

fn jitter(image: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let contrast = rng.gen_range(0.5..1.0);
    let shift = rng.gen_range(-0.15..0.15);
    let noise = Normal::new(0.0, rng.gen_range(0.0..0.05)).expect("non-negative std");
    let mean = image.iter().map(|p| f64::from(*p)).sum::<f64>() / image.len() as f64;
    image
        .iter()
        .map(|p| ((f64::from(*p) - mean) * contrast + mean + shift + noise.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Trains a freshly initialized dense model with Adam and a cosine schedule.
/// A non-finite loss aborts with [`Error::Diverged`].
pub fn pretrain<T: Real>(config: &ViTConfig, data: &Dataset, cfg: &PretrainConfig) -> Result<(VisionTransformer<T>, PretrainReport)> {
    cfg.validate()?;
    let mut model = VisionTransformer::<T>::build(config.clone(), cfg.seed)?;
    if model.is_decomposed() {
        return Err(Error::InvalidArgument("pretraining expects a dense model".into()));
    }
    model.set_trainability(Trainability::All);
    let mut params = flatten(&model);
    let mut opt = Adam::new(params.len(), cfg.learning_rate, (0.9, 0.999), 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574_7261_696e);
    let per_epoch = data.len() / cfg.batch_size;
    let total = per_epoch * cfg.epochs;
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let images = if cfg.augment {
                let jittered: Vec<Vec<f32>> = chunk.iter().map(|&i| jitter(data.image(i), &mut rng)).collect();
                to_tensor(jittered.iter().map(Vec::as_slice))
            } else {
                data.batch::<T>(chunk)
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grad) = loss_and_grad(&model, &images, &labels, cfg.label_smoothing)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss,
                });
            }
            opt.lr = cosine_lr(cfg.learning_rate, report.steps, cfg.warmup_steps, total);
            opt.step(&mut params, &grad);
            unflatten(&mut model, &params);
            report.steps += 1;
            sum += loss;
        }
        let mean = sum / per_epoch.max(1) as f64;
        log::info!("pretrain epoch {}: loss {mean:.4}", report.epoch_loss.len() + 1);
        report.epoch_loss.push(mean);
    }
    model.set_trainability(Trainability::None);
    Ok((model, report))
}

/// Clean top-1 accuracy over a whole dataset.
pub fn accuracy<T: Real>(model: &VisionTransformer<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let pred = model.predict(&data.batch::<T>(chunk))?;
        correct += pred.iter().zip(chunk).filter(|(p, i)| **p == data.labels()[**i]).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}
