//! Loss, Adam optimiser, early-stopped training and the rolling retrain
//! schedule.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{daily_ic, DayScores};
use crate::model::{Model, PreparedData};
use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy against `1[y > 0]`.
    #[default]
    Bce,
    /// Squared error against `sigmoid(y / mse_scale)`.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub mse_scale: f64,
    /// Training days per optimiser step; 0 uses every training day.
    pub batch_days: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            patience: 50,
            lr: 1e-3,
            loss: LossKind::Bce,
            mse_scale: 0.01,
            batch_days: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epochs and patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.mse_scale > 0.0 && self.mse_scale.is_finite()) {
            return Err(Error::Config("mse_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Masked mean loss over `predictions` (`n × 1` per day) against the labels
/// of `days`.
pub fn loss(
    tape: &mut Tape,
    predictions: &[Var],
    data: &PreparedData,
    days: &[usize],
    kind: LossKind,
    mse_scale: f64,
) -> Result<Var> {
    let n = data.n_stocks();
    let mut targets = Vec::with_capacity(n * days.len());
    let mut weights = Vec::with_capacity(n * days.len());
    for &d in days {
        for y in data.labels.day(d) {
            let y = y.unwrap_or(0.0);
            targets.push(match kind {
                LossKind::Bce => f64::from(y > 0.0),
                LossKind::Mse => crate::tape::sigmoid(y / mse_scale),
            });
        }
        weights.extend((0..n).map(|i| f64::from(data.labels.is_valid(i, d))));
    }
    let stacked = tape.concat_rows(predictions)?;
    let targets = Rc::new(Matrix::new(targets.len(), 1, targets)?);
    let weights = Rc::new(Matrix::new(weights.len(), 1, weights)?);
    match kind {
        LossKind::Bce => tape.bce(stacked, targets, weights),
        LossKind::Mse => tape.mse(stacked, targets, weights),
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: ParamStore,
    second: ParamStore,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (name, m) in p.iter() {
                z.insert(name, Matrix::zeros(m.rows(), m.cols()));
            }
            z
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let g = grads.require(name)?;
            let m = self.first.get_mut(name).expect("moments track params");
            let v = self.second.get_mut(name).expect("moments track params");
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ic: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation IC.
    pub params: ParamStore,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_ic: Option<f64>,
}

/// Days in `range` with at least one valid label.
pub fn labelled_days(data: &PreparedData, range: Range<usize>) -> Vec<usize> {
    range
        .filter(|&d| d < data.labels.n_days() && (0..data.n_stocks()).any(|i| data.labels.is_valid(i, d)))
        .collect()
}

/// Mean daily rank IC over `days`, skipping undefined days.
pub fn mean_ic(model: &Model, params: &ParamStore, data: &PreparedData, days: &[usize]) -> Result<Option<f64>> {
    if days.is_empty() {
        return Ok(None);
    }
    let preds = model.predict(params, data, days)?;
    let ics: Vec<f64> = days
        .iter()
        .zip(preds)
        .filter_map(|(&d, p)| DayScores::new(d, p, &data.labels.day(d)).ok().and_then(|s| daily_ic(&s)))
        .collect();
    Ok((!ics.is_empty()).then(|| ics.iter().sum::<f64>() / ics.len() as f64))
}

fn batch_step(
    model: &Model,
    params: &ParamStore,
    data: &PreparedData,
    days: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new();
    let b: Bindings = params.bind(&mut tape);
    let pass = model.forward(&mut tape, &b, data, days)?;
    let l = loss(&mut tape, &pass.predictions, data, days, cfg.loss, cfg.mse_scale)?;
    tape.backward(l)?;
    let value = tape.value(l).item()?;
    let grads = b.gradients(&tape);
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((value, grads))
}

/// Trains from `init` on `train` days, early-stopping on the mean IC over
/// `val` days. With no usable validation days the last epoch is kept.
pub fn train(
    model: &Model,
    data: &PreparedData,
    init: ParamStore,
    train: Range<usize>,
    val: Range<usize>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config("need positive epochs and a finite non-negative lr".into()));
    }
    if val.start < train.end {
        return Err(Error::Contract(format!(
            "validation {val:?} overlaps training {train:?}"
        )));
    }
    model.check_params(&init)?;
    let train_days = labelled_days(data, train.clone());
    let min_days = model.temporal.window + 2;
    if train_days.len() < min_days.min(train.len()) || train_days.is_empty() {
        return Err(Error::Config(format!(
            "training range {train:?} has {} labelled days, need at least {min_days}",
            train_days.len()
        )));
    }
    let val_days = labelled_days(data, val);
    let mut shuffle = crate::rng::substream(seed, "shuffle");
    let mut params = init;
    let mut adam = Adam::new(cfg.lr, &params);
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = if cfg.batch_days == 0 {
            vec![train_days.clone()]
        } else {
            let mut order = train_days.clone();
            order.shuffle(&mut shuffle);
            order.chunks(cfg.batch_days).map(<[usize]>::to_vec).collect()
        };
        let mut total = 0.0;
        for days in &batches {
            let (l, grads) = batch_step(model, &params, data, days, cfg).map_err(|e| match e {
                Error::Numeric(msg) => {
                    log::warn!("epoch {epoch}: {msg}");
                    Error::Divergence {
                        epoch,
                        last_finite: Box::new(params.clone()),
                    }
                }
                other => other,
            })?;
            let before = params.clone();
            adam.step(&mut params, &grads)?;
            if !params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_finite: Box::new(before),
                });
            }
            total += l;
        }
        let train_loss = total / batches.len() as f64;
        let val_ic = mean_ic(model, &params, data, &val_days)?;
        log::debug!("epoch {epoch}: loss {train_loss:.6} val IC {val_ic:?}");
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_ic,
        });
        if let Some(ic) = val_ic {
            if best.as_ref().is_none_or(|(b, _, _)| ic > *b) {
                best = Some((ic, epoch, params.clone()));
            }
        }
        if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= cfg.patience {
                log::debug!("early stop at epoch {epoch}, best {best_epoch}");
                break;
            }
        }
    }
    Ok(match best {
        Some((ic, epoch, p)) => TrainOutcome {
            params: p,
            curve,
            best_epoch: epoch,
            best_val_ic: Some(ic),
        },
        None => TrainOutcome {
            params,
            best_epoch: curve.len() - 1,
            curve,
            best_val_ic: None,
        },
    })
}

/// One rolling fold of day ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub folds: Vec<Fold>,
}

/// Consecutive folds stepping by `test_len` over `t` days.
pub fn rolling_schedule(t: usize, train_len: usize, val_len: usize, test_len: usize) -> Result<Schedule> {
    if train_len == 0 || test_len == 0 {
        return Err(Error::Config("train and test lengths must be positive".into()));
    }
    let span = train_len + val_len + test_len;
    if t < span {
        return Err(Error::Config(format!(
            "{t} days cannot hold one fold of {train_len}+{val_len}+{test_len}"
        )));
    }
    let n = (t - train_len - val_len) / test_len;
    let folds = (0..n)
        .map(|k| {
            let s = k * test_len;
            Fold {
                train: s..s + train_len,
                val: s + train_len..s + train_len + val_len,
                test: s + train_len + val_len..s + span,
            }
        })
        .collect();
    Ok(Schedule { folds })
}

/// Rejects folds whose ranges are out of order or overlap.
pub fn leakage_guard(f: &Fold) -> Result<()> {
    let ordered = f.train.start <= f.train.end
        && f.train.end <= f.val.start
        && f.val.start <= f.val.end
        && f.val.end <= f.test.start
        && f.test.start < f.test.end;
    // Label of day d uses the price of day d + 1.
    if !ordered || f.train.end.max(f.val.end) > f.test.start {
        return Err(Error::Contract(format!("leakage guard: fold {f:?} is not time-ordered")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: serde_json::Value,
    pub epoch: usize,
    pub val_ic: Option<f64>,
}

/// Writes `<stem>.mdgp` and `<stem>.json`; returns both paths.
pub fn save_checkpoint(stem: &Path, params: &ParamStore, meta: &CheckpointMeta) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let bin = stem.with_extension("mdgp");
    let side = stem.with_extension("json");
    params.save(&bin)?;
    fs::write(&side, serde_json::to_string_pretty(meta)?)?;
    Ok((bin, side))
}

pub fn load_checkpoint(stem: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let params = ParamStore::load(&stem.with_extension("mdgp"))?;
    let meta = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    Ok((params, meta))
}
