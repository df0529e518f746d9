use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{bce_loss, sigmoid};
use super::metrics::{metrics, EvalReport};
use super::optim::{clip_grad_norm, Optimizer};
use super::schedule::{lr_at, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Module, StateKind};
use crate::tensor::{Graph, Tensor};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `NaN` when there is no validation set or its metrics are undefined.
    pub val_acc: f64,
    pub val_f1: f64,
    pub val_auc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_acc,val_f1,val_auc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.val_acc, self.val_f1, self.val_auc
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for row in log {
        writeln!(s, "{}", row.csv_row()).unwrap();
    }
    s
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch with the best validation AUC, if any epoch had one.
    pub best_epoch: Option<usize>,
    /// Weights from `best_epoch`, or the final weights without validation.
    pub best: Model<f32>,
}

/// Gradient of every parameter in `for_each` order; untouched ones are zero.
fn collect_grads(model: &Model<f32>, grads: &crate::tensor::Gradients<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.for_each("", &mut |_, kind, t| {
        if kind == StateKind::Param {
            out.push(grads.param(t).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec));
        }
    });
    out
}

/// Forward, backward and one optimizer step on a batch; returns the loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Optimizer<f32>,
    x: &Tensor<f32>,
    labels: &[f32],
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    let (loss, stats, mut grads) = {
        let g = Graph::new();
        let logits = model.forward(&g, &g.constant(x.clone()))?;
        let loss = bce_loss(&g, &logits, labels)?;
        let value = loss.data()[0] as f64;
        let stats = g.take_stats();
        let grads = g.backward(&loss)?;
        (value, stats, collect_grads(model, &grads))
    };
    if !loss.is_finite() {
        return Err(Error::Contract(format!("non-finite training loss {loss}")));
    }
    if let Some(c) = clip_norm {
        clip_grad_norm(&mut grads, c);
    }
    model.apply_stats(&stats);
    opt.step(model, &grads, lr);
    Ok(loss)
}

/// Evaluation-mode probabilities for every sample.
pub fn predict_probs(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        out.extend(model.predict(&x)?.into_iter().map(|z| sigmoid(z as f64)));
    }
    Ok(out)
}

pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let probs = predict_probs(model, data, batch_size)?;
    metrics(&probs, &data.labels(), 0.5)
}

/// Seeded mini-batch training with per-epoch validation; keeps the weights
/// of the best validation AUC.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            total += train_step(model, &mut opt, &x, &y, lr, cfg.clip_norm)? * chunk.len() as f64;
        }
        let (val_acc, val_f1, val_auc) = if val_set.is_empty() || single_class(val_set) {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let r = evaluate(model, val_set, cfg.batch_size)?;
            (r.accuracy, r.f1, r.auc)
        };
        let row = EpochLog { epoch, lr, train_loss: total / train_set.len() as f64, val_acc, val_f1, val_auc };
        on_epoch(&row);
        if !val_auc.is_nan() && best.as_ref().is_none_or(|(_, a, _)| val_auc > *a) {
            best = Some((epoch, val_auc, model.clone()));
        }
        log.push(row);
    }
    Ok(match best {
        Some((epoch, _, m)) => TrainOutcome { log, best_epoch: Some(epoch), best: m },
        None => TrainOutcome { log, best_epoch: None, best: model.clone() },
    })
}

fn single_class(d: &Dataset) -> bool {
    let l = d.labels();
    l.iter().all(|&v| v == l[0])
}
