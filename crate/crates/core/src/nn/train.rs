//! Minibatch training, evaluation and the training log.

use std::fmt::Write as _;

use super::network::{Mode, Model};
use super::optim::{sgd_step, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::yard::alphas;

/// One row of the training log, written at the end of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Epoch counter over the whole run.
    pub epoch: usize,
    /// Optimizer steps taken so far over the whole run.
    pub step: usize,
    /// Rate of the last step of the epoch.
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    /// `(layer_id, α)` of the mixed layers present during the epoch.
    pub alphas: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochStats>,
}

impl TrainLog {
    pub fn epochs(&self) -> usize {
        self.rows.len()
    }

    pub fn steps(&self) -> usize {
        self.rows.last().map_or(0, |r| r.step)
    }

    /// `epoch,step,lr,loss,train_acc,eval_acc,alpha_<id>...`; empty cells for
    /// layers no longer mixed.
    pub fn to_csv(&self) -> String {
        let mut ids: Vec<usize> = self.rows.iter().flat_map(|r| r.alphas.iter().map(|a| a.0)).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut out = String::from("epoch,step,lr,loss,train_acc,eval_acc");
        for id in &ids {
            let _ = write!(out, ",alpha_{id}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{:.6e},{:.6},{:.4},", r.epoch, r.step, r.lr, r.loss, r.train_acc);
            if let Some(acc) = r.eval_acc {
                let _ = write!(out, "{acc:.4}");
            }
            for id in &ids {
                out.push(',');
                if let Some((_, a)) = r.alphas.iter().find(|a| a.0 == *id) {
                    let _ = write!(out, "{a:.6}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs one shuffled pass over `data`. `lr_at` maps fractional epochs since
/// the start of the phase to a learning rate; `phase_epoch` is the epoch index
/// within the phase.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    lr_at: &dyn Fn(f64) -> f64,
    phase_epoch: usize,
    rng: &mut Rng,
    log: &mut TrainLog,
    eval: Option<&Dataset>,
) -> Result<EpochStats> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    // a lone trailing sample has no batch statistics
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).filter(|b| b.len() > 1).collect();
    if batches.is_empty() {
        return Err(Error::Config("dataset too small for one batch".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut lr = 0.0;
    let mut step = log.steps();
    for (b, idx) in batches.iter().enumerate() {
        let flips: Option<Vec<bool>> = cfg.flip.then(|| idx.iter().map(|_| rng.below(2) == 1).collect());
        let (x, labels) = data.batch::<T>(idx, flips.as_deref());
        model.store.zero_grad();
        let mut pass = model.forward(&x, Some(&labels), Mode::Train)?;
        model.backward(&mut pass)?;
        let loss = pass.tape.value(pass.loss.expect("labels were given")).data()[0]
            .to_f64()
            .unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {phase_epoch}, batch {b}")));
        }
        let logits = pass.tape.value(pass.logits);
        let k = logits.cols();
        for (row, &l) in logits.data().chunks_exact(k).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(pred == l);
        }
        loss_sum += loss * idx.len() as f64;
        seen += idx.len();
        lr = lr_at(phase_epoch as f64 + b as f64 / batches.len() as f64);
        sgd_step(&mut model.store, lr, cfg.momentum, cfg.weight_decay);
        step += 1;
    }
    let eval_acc = eval.map(|d| evaluate(model, d, cfg.batch_size)).transpose()?;
    let stats = EpochStats {
        epoch: log.epochs() + 1,
        step,
        lr,
        loss: loss_sum / seen as f64,
        train_acc: correct as f64 / seen as f64,
        eval_acc,
        alphas: alphas(model),
    };
    log.rows.push(stats.clone());
    Ok(stats)
}

/// Top-1 accuracy with batch norm in inference mode.
pub fn evaluate<T: Real>(model: &mut Model<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk, None);
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains for `cfg.epochs` with warmup and the configured schedule.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &mut Rng,
    log: &mut TrainLog,
) -> Result<Vec<EpochStats>> {
    let lr_at = |p: f64| cfg.lr_at(p);
    (0..cfg.epochs)
        .map(|e| train_epoch(model, train, cfg, &lr_at, e, rng, log, eval))
        .collect()
}
