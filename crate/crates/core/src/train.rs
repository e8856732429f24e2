//! Cross-entropy training with AdamW and a warmup + cosine schedule.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{fmt_f64, parse_value};
use crate::error::{Error, Result};
use crate::model::{DropPath, Model, Prepared};
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds shuffling and drop-path draws.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_epochs: 10,
            epochs: 300,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "lr",
    "min_lr",
    "weight_decay",
    "warmup_epochs",
    "epochs",
    "batch_size",
    "beta1",
    "beta2",
    "adam_eps",
    "train_seed",
];

impl TrainConfig {
    /// Applies one `key = value` setting; `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "min_lr" => self.min_lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "train_seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", fmt_f64(self.lr)),
            ("min_lr", fmt_f64(self.min_lr)),
            ("weight_decay", fmt_f64(self.weight_decay)),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", fmt_f64(self.beta1)),
            ("beta2", fmt_f64(self.beta2)),
            ("adam_eps", fmt_f64(self.adam_eps)),
            ("train_seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.min_lr >= 0.0 && self.min_lr <= self.lr)
        {
            return Err(Error::Config("need 0 <= min_lr <= lr with lr > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "need beta1, beta2 in [0, 1) and adam_eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// `−log softmax(logits)[label]` for logits of shape `[classes]`.
pub fn cross_entropy<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    let classes = logits.shape()[0];
    if label >= classes {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(logits
        .log_softmax(0)?
        .narrow(0, label, 1)?
        .sum_all()?
        .neg()?)
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Linear warmup to `lr`, then half-cosine decay to `min_lr`, per step.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (PI * progress).cos())
}

/// Weight decay applies to weight matrices and SSM projections, not to
/// biases, norm affines, tokens or SSM dynamics.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last.ends_with("weight") || matches!(last, "w_b" | "w_c" | "w_delta")
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            decay: store.iter().map(|(n, _)| decays(n)).collect(),
        }
    }

    /// One update with gradients given in store order.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidInput(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (g, m, v) = (&grads[k], &mut self.m[k], &mut self.v[k]);
            let shrink = if self.decay[k] {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let old = store.get(id);
            let mut next = old.to_vec();
            for i in 0..next.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                next[i] = next[i] * shrink - lr * step;
            }
            let shape = old.shape().to_vec();
            store.set(id, Tensor::new(shape, next)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Mean loss gradient over `batch` in store order, plus summed loss and hits.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &[&Prepared],
    drop_rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, StepStats)> {
    let mut grads: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut stats = StepStats {
        loss: 0.0,
        correct: 0,
    };
    let scale = 1.0 / batch.len() as f64;
    for x in batch {
        let label = x
            .label
            .ok_or_else(|| Error::InvalidInput("training sample without a label".into()))?;
        let tape = Tape::new();
        let p = store.bind(&tape);
        let drop = DropPath {
            rate: model.cfg.drop_path_rate,
            rng: drop_rng,
        };
        let logits = model.forward(&p, x, Some(drop))?;
        let loss = cross_entropy(logits, label)?;
        tape.backward(loss)?;
        stats.loss += loss.value().item();
        stats.correct += usize::from(argmax(logits.value().data()) == label);
        for (acc, var) in grads.iter_mut().zip(p.vars()) {
            if let Some(g) = var.grad() {
                acc.iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += scale * b);
            }
        }
    }
    Ok((grads, stats))
}

/// One optimizer step on `batch`.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[&Prepared],
    lr: f64,
    drop_rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let (grads, stats) = batch_gradients(model, store, batch, drop_rng)?;
    opt.update(store, &grads, lr)?;
    Ok(stats)
}

/// Evaluation-mode predictions.
pub fn predict(model: &Model, store: &ParamStore, data: &[Prepared]) -> Result<Vec<usize>> {
    data.iter()
        .map(|x| {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            Ok(argmax(model.forward(&p, x, None)?.value().data()))
        })
        .collect()
}

pub fn accuracy(pred: &[usize], data: &[Prepared]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = pred
        .iter()
        .zip(data)
        .filter(|(p, x)| x.label == Some(**p))
        .count();
    hits as f64 / data.len() as f64
}

/// `counts[true][predicted]`.
pub fn confusion(pred: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(labels) {
        if p < classes && t < classes {
            m[t][p] += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6e}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.lr
        )
    }
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each one.
pub fn fit(
    model: &Model,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    train: &[Prepared],
    test: &[Prepared],
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut opt = AdamW::new(store, cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss, mut correct, mut lr) = (0.0, 0, cfg.lr);
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_at(step, total, warmup, cfg.lr, cfg.min_lr);
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let stats = train_step(model, store, &mut opt, &batch, lr, &mut drop_rng)?;
            loss += stats.loss;
            correct += stats.correct;
            step += 1;
        }
        let test_acc = if test.is_empty() {
            0.0
        } else {
            accuracy(&predict(model, store, test)?, test)
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
            lr,
        };
        on_epoch(&m)?;
        history.push(m);
    }
    Ok(history)
}
