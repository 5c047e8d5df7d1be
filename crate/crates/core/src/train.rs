//! Adam with L2 weight decay, polynomial learning-rate decay and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Checkpoint, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{Dapnet, Mode};
use crate::pipeline::{sample_fixed, Block, Sample};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to every gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update from the gradients held in `store`
    /// (a parameter without a gradient is treated as having a zero one).
    pub fn adam_step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if let Some(g) = &p.tensor.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + weight_decay * data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Polynomial decay from `lr_initial` to `lr_final` over `total` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total: usize,
    pub power: f64,
}

impl Schedule {
    pub fn new(lr_initial: f64, lr_final: f64, total: usize) -> Result<Self> {
        if !(lr_initial > lr_final && lr_final > 0.0) || total == 0 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs lr_initial > lr_final > 0 and at least one iteration, got {lr_initial}, {lr_final}, {total}"
            )));
        }
        Ok(Self {
            lr_initial,
            lr_final,
            total,
            power: 0.7,
        })
    }

    /// Rate at fractional progress `t = i / total` in `[0, 1]`.
    pub fn rate(&self, t: f64) -> f64 {
        let f = (1.0 - t.clamp(0.0, 1.0)).powf(self.power);
        self.lr_final + (self.lr_initial - self.lr_final) * f
    }

    /// Rate at iteration `i`, `1 <= i <= total`.
    pub fn poly_lr(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.total {
            return Err(Error::InvalidArgument(format!(
                "iteration {i} outside 1..={}",
                self.total
            )));
        }
        Ok(self.rate(i as f64 / self.total as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr_initial: 1e-3,
            lr_final: 1e-5,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub train_oa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

pub struct TrainOutcome {
    pub model: Dapnet,
    pub log: Vec<EpochLog>,
    /// Epoch with the lowest loss (0 when no epoch ran).
    pub best_epoch: usize,
    pub best: Checkpoint,
}

/// Forward/backward over `samples` on one tape with the mean loss, then an
/// Adam update and the batch-norm running-statistics update.
pub fn train_step(model: &mut Dapnet, opt: &mut OptimState, samples: &[Sample], lr: f64) -> Result<StepStats> {
    if samples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(samples.len());
    let mut stats = Vec::new();
    let (mut correct, mut total) = (0, 0);
    for sample in samples {
        let (loss, out) = model.loss(&mut tape, sample, Mode::Train)?;
        let labels = sample.labels.as_ref().expect("loss checked labels");
        let predicted = tape.value(out.logits).argmax_rows();
        correct += predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        total += labels.len();
        losses.push(loss);
        stats.extend(out.bn_stats);
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = tape.add(sum, l)?;
    }
    let mean = tape.scale_const(sum, 1.0 / samples.len() as f64);
    let loss = tape.value(mean).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(mean)?;
    model.params_mut().zero_grad();
    grads.accumulate_into(model.params_mut());
    opt.adam_step(model.params_mut(), lr)?;
    model.apply_bn_stats(&stats);
    Ok(StepStats { loss, correct, total })
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,lr,loss,train_oa\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.lr, e.loss, e.train_oa);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains on normalized, labelled `blocks`. Every epoch visits the blocks in
/// a fresh random order and draws `sample_points` points from each. When
/// `run_dir` is given, `log.csv`, `best.ckpt` and `last.ckpt` are kept up to
/// date there after every epoch.
pub fn train_loop(
    blocks: &[Block],
    mut model: Dapnet,
    config: &TrainConfig,
    sample_points: usize,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if blocks.is_empty() {
        return Err(Error::Empty("training blocks"));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if let Some(i) = blocks.iter().position(|b| b.records.iter().any(|r| r.label.is_none())) {
        return Err(Error::InvalidArgument(format!(
            "training block {i} has unlabelled points"
        )));
    }
    let batches = blocks.len().div_ceil(config.batch_size);
    let schedule = Schedule::new(config.lr_initial, config.lr_final, (config.epochs * batches).max(1))?;
    let mut opt = OptimState::new(model.params(), config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = model.to_checkpoint()?;
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;
    let mut iteration = 0;
    let mut order: Vec<usize> = (0..blocks.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut total, mut lr) = (0.0, 0, 0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let samples = chunk
                .iter()
                .map(|&b| sample_fixed(&blocks[b], sample_points, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            iteration += 1;
            lr = schedule.poly_lr(iteration)?;
            let step = train_step(&mut model, &mut opt, &samples, lr)?;
            loss_sum += step.loss * samples.len() as f64;
            correct += step.correct;
            total += step.total;
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / blocks.len() as f64,
            train_oa: correct as f64 / total as f64,
        };
        log.push(entry);
        if entry.loss < best_loss {
            best_loss = entry.loss;
            best_epoch = epoch;
            best = model.to_checkpoint()?;
            if let Some(dir) = run_dir {
                best.save(dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = run_dir {
            model.to_checkpoint()?.save(dir.join("last.ckpt"))?;
            write_log(&dir.join("log.csv"), &log)?;
        }
    }
    if let Some(dir) = run_dir {
        if config.epochs == 0 {
            best.save(dir.join("best.ckpt"))?;
            best.save(dir.join("last.ckpt"))?;
            write_log(&dir.join("log.csv"), &log)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best,
    })
}
