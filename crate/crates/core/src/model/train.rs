use std::f64::consts::PI;

use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tasks::{accuracy, metric_r2, metric_rse, Dataset, MetricReport, Targets};
use crate::tensor::{ParamStore, Tape};

const SHUFFLE_STREAM: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Floor of the cosine schedule.
    #[serde(default)]
    pub min_lr: f64,
    /// Stop after this many epochs without a better validation score.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Stop as soon as validation accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Clip the global gradient norm to this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_eval_batch() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: default_lr(),
            min_lr: 0.0,
            patience: None,
            target_accuracy: None,
            grad_clip: None,
            eval_batch_size: default_eval_batch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(config_err(format!("need 0 <= min_lr <= lr with lr > 0, got {} and {}", self.min_lr, self.lr)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err("gradient clip must be positive"));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.lr;
        }
        let frac = epoch as f64 / self.epochs as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * frac).cos())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| ArrayD::zeros(t.values.raw_dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            ndarray::Zip::from(&mut p.values).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss; absent for the initial evaluation.
    pub train_loss: Option<f64>,
    pub val: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainHistory {
    /// Epoch 0 holds the metrics before any update.
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights the model holds after training.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> &MetricReport {
        &self.records[self.best_epoch].val
    }

    pub fn max_accuracy(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.val.accuracy).reduce(f64::max)
    }
}

fn target_matrix(ds: &Dataset, idx: &[usize]) -> Result<Array2<f64>> {
    match &ds.targets {
        Targets::Values(v) => {
            let (_, c, h) = v.dim();
            let sel = v.select(Axis(0), idx);
            Ok(sel.into_shape_with_order((idx.len(), c * h)).map_err(|e| dim_err(e.to_string()))?)
        }
        Targets::Classes { .. } => Err(dim_err("class targets have no matrix form")),
    }
}

fn check_dataset(model: &Model, ds: &Dataset) -> Result<()> {
    let cfg = model.config();
    if ds.seq_len() != cfg.seq_len || ds.features() != cfg.features {
        return Err(config_err("dataset shape does not match the model"));
    }
    match (&ds.targets, cfg.head) {
        (Targets::Classes { classes, .. }, super::Head::Classification { classes: c }) if *classes == c => Ok(()),
        (Targets::Values(v), super::Head::Regression { channels, horizon }) if v.dim().1 == channels && v.dim().2 == horizon => {
            Ok(())
        }
        _ => Err(config_err("dataset targets do not match the model head")),
    }
}

/// Inference-mode metrics over a whole dataset.
pub fn evaluate(model: &mut Model, ds: &Dataset, batch_size: usize) -> Result<MetricReport> {
    check_dataset(model, ds)?;
    let n = ds.samples();
    let outs = model.config().head.outputs();
    let mut preds = Array2::zeros((n, outs));
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let x = ds.inputs.slice(ndarray::s![start..end, .., ..]);
        let p = model.predict(x)?;
        preds.slice_mut(ndarray::s![start..end, ..]).assign(&p);
    }
    match &ds.targets {
        Targets::Classes { labels, .. } => {
            let mut loss = 0.0;
            for (row, &y) in preds.outer_iter().zip(labels) {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                loss += z.ln() + m - row[y];
            }
            Ok(MetricReport { loss: loss / n as f64, accuracy: Some(accuracy(preds.view(), labels)?), r2: None, rse: None })
        }
        Targets::Values(v) => {
            let p3 = preds.into_shape_with_order(v.dim()).map_err(|e| dim_err(e.to_string()))?;
            let loss = (&p3 - v).mapv(|d| d * d).mean().unwrap_or(0.0);
            let r2 = metric_r2(p3.view(), v.view()).ok();
            let rse = metric_rse(p3.view(), v.view()).ok();
            Ok(MetricReport { loss, accuracy: None, r2, rse })
        }
    }
}

fn better(a: &MetricReport, b: &MetricReport) -> bool {
    match (a.accuracy, b.accuracy) {
        (Some(x), Some(y)) if x != y => x > y,
        _ => a.loss < b.loss,
    }
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store.iter().map(|(_, _, t)| t.grad.iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).grad.mapv_inplace(|g| g * s);
        }
    }
}

/// Trains with BPTT and Adam under a cosine schedule, keeping the weights of
/// the best validation epoch. `on_epoch` sees every record as it is made.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_dataset(model, train_set)?;
    check_dataset(model, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut adam = Adam::new(model.params());
    let n = train_set.samples();
    let mut order: Vec<usize> = (0..n).collect();

    let initial = evaluate(model, val_set, cfg.eval_batch_size)?;
    let rec = EpochRecord { epoch: 0, lr: cfg.lr_at(0), train_loss: None, val: initial };
    on_epoch(&rec);
    let mut history = TrainHistory { records: vec![rec], best_epoch: 0, stopped_early: false };
    let mut best_model = model.clone();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch - 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = train_set.inputs.select(Axis(0), idx);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, x.view(), true)?;
            let loss = match &train_set.targets {
                Targets::Classes { labels, .. } => {
                    let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    tape.softmax_cross_entropy(out.output, &ys)?
                }
                Targets::Values(_) => tape.mse(out.output, target_matrix(train_set, idx)?)?,
            };
            let lv = tape.value(loss)[[0, 0]];
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, reason: format!("training loss is {lv}") });
            }
            loss_sum += lv * idx.len() as f64;
            let grads = tape.backward(loss);
            let store = model.params_mut();
            store.zero_grad();
            tape.accumulate(&grads, store)?;
            if let Some(c) = cfg.grad_clip {
                clip_gradients(store, c);
            }
            adam.step(store, lr);
        }
        let val = evaluate(model, val_set, cfg.eval_batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::Divergence { epoch, reason: format!("validation loss is {}", val.loss) });
        }
        let rec = EpochRecord { epoch, lr, train_loss: Some(loss_sum / n as f64), val };
        on_epoch(&rec);
        log::debug!("epoch {epoch}: {:?}", rec);
        let improved = better(&rec.val, history.best());
        let hit_target = matches!((cfg.target_accuracy, rec.val.accuracy), (Some(t), Some(a)) if a >= t);
        history.records.push(rec);
        if improved {
            history.best_epoch = epoch;
            best_model = model.clone();
        }
        if hit_target {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
        if cfg.patience.is_some_and(|p| epoch - history.best_epoch >= p) {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    *model = best_model;
    Ok(history)
}
