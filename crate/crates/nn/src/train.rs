//! Adam, the warmup-then-cosine schedule, and the training loop.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sdn_core::dataset::{pair_rng, pair_seed, PairRecord};
use sdn_core::eval::change_iou;
use sdn_core::par::{self, Execution};
use sdn_core::render::AugmentConfig;

use crate::checkpoint::{self, RngState};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 60,
            warmup_epochs: 5,
            peak_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            augment: AugmentConfig::photometric(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup must be shorter than training");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("invalid Adam coefficients");
        }
        Ok(())
    }

    /// Learning rate at fractional epoch `e`: linear warmup to the peak at
    /// `warmup_epochs`, then cosine decay reaching zero at `epochs`.
    pub fn lr_at_epoch(&self, e: f64) -> f64 {
        let w = self.warmup_epochs as f64;
        let total = self.epochs as f64;
        if e < w {
            self.peak_lr * e / w
        } else {
            let t = ((e - w) / (total - w)).clamp(0.0, 1.0);
            self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }

    /// Rate for optimizer step `step` (0-based); warmup is evaluated at the
    /// end of the step so the first update is not wasted.
    pub fn lr_at_step(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let e = (step + 1) as f64 / steps_per_epoch.max(1) as f64;
        if e <= self.warmup_epochs as f64 {
            self.lr_at_epoch(e)
        } else {
            self.lr_at_epoch(step as f64 / steps_per_epoch.max(1) as f64)
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Model<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || model.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Adam { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::c(lr * c2.sqrt() / c1);
        let eps = T::c(self.eps * c2.sqrt());
        for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *x -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// A pair ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub anchor: Vec<f32>,
    pub sample: Vec<f32>,
    pub mask: Vec<u8>,
}

pub fn to_sample(model: &Model<f32>, record: &PairRecord) -> Result<Sample, NnError> {
    let (anchor, sample) = model.prepare(record)?;
    Ok(Sample { anchor, sample, mask: record.rasters.mask.data.clone() })
}

/// Mean loss and averaged gradients over a batch; per-sample graphs run
/// under `exec` and gradients are summed in batch order.
pub fn batch_gradients(model: &Model<f32>, batch: &[Sample], exec: Execution) -> Result<(f64, Vec<Vec<f32>>), NnError> {
    let per = par::try_map_indexed(exec, batch.len(), |i| {
        let s = &batch[i];
        model.loss_and_grads(&s.anchor, &s.sample, &s.mask)
    })?;
    let mut sum: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += *l as f64;
        for (acc, gi) in sum.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, &b)| *a += b);
        }
    }
    let inv = 1.0 / batch.len() as f32;
    sum.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok((loss / batch.len() as f64, sum))
}

/// Per-pair change IoU of the model's argmax predictions.
pub fn pair_ious(model: &Model<f32>, records: &[PairRecord], exec: Execution) -> Result<Vec<f64>, NnError> {
    par::try_map_indexed(exec, records.len(), |i| {
        let r = &records[i].rasters;
        let pred = model.predict_mask(&r.anchor_rgb, &r.sample_rgb)?;
        change_iou(&pred, &r.mask).map_err(|e| NnError::Eval(e.to_string()))
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    sdn_core::eval::quantile_sorted(&s, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mean_iou: f64,
    pub val_median_iou: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct TrainOptions<'a> {
    pub exec: Execution,
    /// Checkpoint with the best mean validation IoU so far.
    pub best_path: Option<PathBuf>,
    /// Checkpoint after the latest epoch.
    pub last_path: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'a>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions { exec: Execution::available(), best_path: None, last_path: None, on_epoch: None }
    }
}

pub struct TrainOutcome {
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn check_finite(loss: f64, step: usize) -> Result<(), NnError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(NnError::Diverged { step, loss })
    }
}

/// Trains with per-epoch shuffling and augmentation; keeps the checkpoint
/// with the best mean validation IoU.
pub fn train(
    mut model: Model<f32>,
    train_set: &[PairRecord],
    val_set: &[PairRecord],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::Config("empty training set".into()));
    }
    for r in train_set.iter().chain(val_set) {
        if r.rasters.size() != (model.arch.input_size, model.arch.input_size) {
            return Err(NnError::Shape(format!(
                "dataset pair {} is {:?}, model expects {}",
                r.meta.pair_id,
                r.rasters.size(),
                model.arch.input_size
            )));
        }
    }
    let exec = opts.exec;
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.eps);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut shuffle = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = par::try_map_indexed(exec, chunk.len(), |i| {
                let id = chunk[i];
                let mut rng = pair_rng(cfg.seed, &format!("augment/{epoch}"), id as u64);
                to_sample(&model, &train_set[id].augmented(&cfg.augment, &mut rng))
            })?;
            let (loss, grads) = batch_gradients(&model, &batch, exec)?;
            check_finite(loss, step)?;
            lr = cfg.lr_at_step(step, steps_per_epoch);
            adam.step(&mut model, &grads, lr);
            loss_sum += loss;
            step += 1;
        }
        let ious = pair_ious(&model, val_set, exec)?;
        let entry = EpochLog {
            epoch,
            steps: step,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_mean_iou: mean(&ious),
            val_median_iou: median(&ious),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&entry);
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| entry.val_mean_iou > *b);
        if improved {
            best = Some((entry.val_mean_iou, epoch, model.clone()));
        }
        let rng = RngState::from_seed(cfg.seed, epoch as u64 + 1);
        if let Some(path) = &opts.last_path {
            checkpoint::save(path, &model, Some(cfg), epoch + 1, Some(&rng))?;
        }
        if let (true, Some(path)) = (improved, &opts.best_path) {
            checkpoint::save(path, &model, Some(cfg), epoch + 1, Some(&rng))?;
        }
        log.push(entry);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { best: best_model, last: model, best_epoch, log })
}

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    pub model: Model<f32>,
    pub steps: usize,
    pub mean_iou: f64,
    pub losses: Vec<f64>,
}

/// Fits a fixed set of pairs without augmentation: linear warmup over
/// `warmup_steps`, then constant rate. Stops once the mean IoU on the same
/// pairs reaches `target_iou` (checked every `check_every` steps) or after
/// `max_steps`.
#[allow(clippy::too_many_arguments)]
pub fn overfit(
    mut model: Model<f32>,
    records: &[PairRecord],
    cfg: &TrainConfig,
    warmup_steps: usize,
    max_steps: usize,
    check_every: usize,
    target_iou: f64,
    exec: Execution,
) -> Result<OverfitOutcome, NnError> {
    let samples = records.iter().map(|r| to_sample(&model, r)).collect::<Result<Vec<_>, _>>()?;
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    let mut cursor = samples.len();
    let mut mean_iou = mean(&pair_ious(&model, records, exec)?);
    let mut step = 0;
    while step < max_steps && mean_iou < target_iou {
        if cursor + cfg.batch_size > samples.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<Sample> = order[cursor..(cursor + cfg.batch_size).min(samples.len())]
            .iter()
            .map(|&i| samples[i].clone())
            .collect();
        cursor += cfg.batch_size;
        let (loss, grads) = batch_gradients(&model, &batch, exec)?;
        check_finite(loss, step)?;
        let lr = cfg.peak_lr * ((step + 1) as f64 / warmup_steps.max(1) as f64).min(1.0);
        adam.step(&mut model, &grads, lr);
        losses.push(loss);
        step += 1;
        if step % check_every == 0 || step == max_steps {
            mean_iou = mean(&pair_ious(&model, records, exec)?);
        }
    }
    Ok(OverfitOutcome { model, steps: step, mean_iou, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, Mechanism};

    #[test]
    fn schedule_shape() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at_epoch(0.0), 0.0);
        assert_eq!(c.lr_at_epoch(5.0), c.peak_lr);
        assert!(c.lr_at_epoch(59.0) <= 1e-3 * c.peak_lr);
        assert_eq!(c.lr_at_epoch(60.0), 0.0);
        assert!(c.lr_at_epoch(30.0) < c.lr_at_epoch(10.0));
        assert!(c.lr_at_step(0, 32) > 0.0);
        assert_eq!(c.lr_at_step(5 * 32 - 1, 32), c.peak_lr);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = TrainConfig { warmup_epochs: 60, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c.warmup_epochs = 5;
        c.peak_lr = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut m = Model::<f32>::new(ArchConfig::desk(Mechanism::Gca), 0).unwrap();
        let before = m.params.clone();
        let grads: Vec<Vec<f32>> = m.params.iter().map(|p| vec![1.0; p.data.len()]).collect();
        let mut adam = Adam::new(&m, 0.9, 0.999, 1e-8);
        adam.step(&mut m, &grads, 0.0);
        assert_eq!(m.params, before);
        adam.step(&mut m, &grads, 1e-3);
        assert_ne!(m.params, before);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut m = Model::<f64>::new(ArchConfig::desk(Mechanism::Gca), 0).unwrap();
        let before = m.params[0].data[0];
        let grads: Vec<Vec<f64>> = m.params.iter().map(|p| vec![-3.0; p.data.len()]).collect();
        let mut adam = Adam::new(&m, 0.9, 0.999, 1e-8);
        adam.step(&mut m, &grads, 0.01);
        assert!((m.params[0].data[0] - before - 0.01).abs() < 1e-9);
    }
}
