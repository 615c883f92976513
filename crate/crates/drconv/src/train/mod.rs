//! Desk-scale training: a small classifier, SGD with momentum, linear
//! learning-rate decay, and deterministic results — the same seed gives the
//! same model, and the gradient reduction runs in item order so any thread
//! count produces bit-identical parameters.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use data::Dataset;
use model::Model;
use optim::{SgdConfig, SgdMomentum};

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    0.05
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    4e-5
}

fn default_threads() -> usize {
    1
}

/// Training hyperparameters. The learning rate decays linearly from `lr`
/// toward zero over all steps; `threads` only spreads per-item gradient
/// work and never changes the result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            threads: default_threads(),
            seed: 0,
        }
    }
}

/// What one epoch did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Norm of the epoch's accumulated guide-filter gradients — a routed
    /// layer whose guide stops receiving signal shows up as zero here.
    /// `None` when the model has no routed blocks.
    pub guide_grad_norm: Option<f64>,
}

/// One-line `key=value` form for logs.
pub fn format_metrics(m: &EpochMetrics) -> String {
    let mut s = format!(
        "epoch={} lr={:.6} train_loss={:.4} train_acc={:.4}",
        m.epoch, m.lr, m.train_loss, m.train_accuracy
    );
    if let (Some(tl), Some(ta)) = (m.test_loss, m.test_accuracy) {
        s.push_str(&format!(" test_loss={tl:.4} test_acc={ta:.4}"));
    }
    if let Some(g) = m.guide_grad_norm {
        s.push_str(&format!(" guide_grad={g:.3e}"));
    }
    s
}

/// Run every item index through `f`, possibly on several threads, and hand
/// back the results in item order. Work is split into contiguous chunks, so
/// the output is independent of the thread count.
fn scatter_items<T, F>(threads: usize, count: usize, f: &F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if count == 0 {
        return Ok(Vec::new());
    }
    let t = threads.max(1).min(count);
    if t == 1 {
        return (0..count).map(f).collect();
    }
    let chunk = count.div_ceil(t);
    let mut slots: Vec<Option<Result<T>>> = Vec::new();
    slots.resize_with(count, || None);
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for start in (0..count).step_by(chunk) {
            let end = (start + chunk).min(count);
            handles.push(s.spawn(move || (start, (start..end).map(f).collect::<Vec<Result<T>>>())));
        }
        for h in handles {
            let (start, results) = h.join().expect("gradient worker panicked");
            for (off, r) in results.into_iter().enumerate() {
                slots[start + off] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every item was assigned to a chunk"))
        .collect()
}

/// Mean loss and accuracy of `model` over `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, threads: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let results = scatter_items(threads, ds.len(), &|i| {
        let (logits, _) = model.forward_trace(&ds.item(i))?;
        let (loss, _) = model::cross_entropy(&logits, ds.labels[i]);
        Ok((loss, model::argmax(&logits) == ds.labels[i]))
    })?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (l, c) in results {
        loss += l;
        if c {
            correct += 1;
        }
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Train `model` in place. Shuffles each epoch, averages per-item gradients
/// over each batch (summed in item order), applies SGD with momentum under a
/// linearly decaying learning rate, and records per-epoch metrics (test
/// metrics when `test_set` is given). A non-finite batch loss or parameter
/// aborts with [`Error::Diverged`].
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive and finite, got {}", cfg.lr)));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", cfg.momentum)));
    }
    if let Some(&bad) = train_set.labels.iter().find(|&&l| l >= model.config.classes) {
        return Err(Error::Config(format!(
            "label {bad} out of range for a {}-class model",
            model.config.classes
        )));
    }

    let mut opt = SgdMomentum::new(
        SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay },
        model,
    );
    let guide_groups: Vec<usize> = model
        .param_layout()
        .iter()
        .enumerate()
        .filter(|(_, (name, _, _))| name.ends_with(".guide"))
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let epoch_lr = cfg.lr * (1.0 - step as f64 / total_steps as f64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut guide_sq = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr * (1.0 - step as f64 / total_steps as f64);
            let m: &Model = model;
            let results = scatter_items(cfg.threads, batch.len(), &|i| {
                let idx = batch[i];
                m.grad_item(&train_set.item(idx), train_set.labels[idx])
            })?;

            let mut batch_loss = 0.0;
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for (l, c, g) in results {
                batch_loss += l;
                if c {
                    correct += 1;
                }
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (av, gv) in acc.iter_mut().zip(&g) {
                            for (x, y) in av.iter_mut().zip(gv) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("batches are never empty");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            loss_sum += batch_loss * batch.len() as f64;
            for &gi in &guide_groups {
                for x in &grads[gi] {
                    guide_sq += x * x;
                }
            }

            opt.step(model, &grads, lr)?;
            step += 1;
        }

        let train_loss = loss_sum / train_set.len() as f64;
        if !model.is_finite() {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }

        let (test_loss, test_accuracy) = match test_set {
            Some(ts) => {
                let (l, a) = evaluate(model, ts, cfg.threads)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        history.push(EpochMetrics {
            epoch,
            lr: epoch_lr,
            train_loss,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_loss,
            test_accuracy,
            guide_grad_norm: if guide_groups.is_empty() { None } else { Some(guide_sq.sqrt()) },
        });
    }
    Ok(history)
}
