//! Training loop, evaluation and the ablation harness.

mod ablate;
mod eval;
mod model;

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{mask_only, strong_augment, weak_augment, AugmentConfig, AugmentError};
use crate::numerics::{AdamConfig, AdamState, Graph, NumericsError, ParamStore};
use crate::parm::{bce_loss, total_loss, ContextOrder};
use crate::perception::{acl_loss, panels_to_tensor, EncoderConfig};
use crate::scalar::Scalar;
use crate::taskgen::rng::{derive, stream};
use crate::taskgen::Panel;

pub use ablate::{ablate, grid_cells, write_report_csv, AblationCell, AblationGrid, ReportRow};
pub use eval::{evaluate, predict, sign_test_p, ErrorAsymmetry, Metrics, RuleMetrics};
pub use model::{Forward, HeadKind, Model, ModelConfig};

const INIT_TAG: u64 = 0x1417;
const SHUFFLE_TAG: u64 = 0x5eed;
const CONTEXT_TAG: u64 = 0xc0de;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Which augmented pair feeds the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Views {
    /// Weak view against weak-then-masked view.
    Both,
    /// Two independent weak views.
    WeakOnly,
    /// Raw panel against a masked panel.
    StrongOnly,
}

impl Views {
    pub fn name(self) -> &'static str {
        match self {
            Views::Both => "both",
            Views::WeakOnly => "wda_only",
            Views::StrongOnly => "sda_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub views: Views,
    pub contrastive: bool,
    pub acl_temperature: f64,
    pub eval_batch_size: usize,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Record elapsed seconds in the history; off gives byte-stable output.
    pub wall_time: bool,
    /// Keep the contrastive term in the loss value but cut it from the gradient.
    #[serde(default)]
    pub detach_contrastive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 20,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            views: Views::Both,
            contrastive: true,
            acl_temperature: 1.0,
            eval_batch_size: 64,
            target_accuracy: None,
            wall_time: true,
            detach_contrastive: false,
        }
    }
}

impl TrainConfig {
    /// Narrow encoder and larger steps for single-rule runs on a CPU.
    pub fn smoke(seed: u64) -> Self {
        let mut cfg = Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed,
            wall_time: false,
            ..Self::default()
        };
        cfg.model.encoder = EncoderConfig {
            widths: vec![8, 16, 16, 16],
            embed_dim: 32,
            resolution: 64,
        };
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.acl_temperature > 0.0) {
            return bad(format!("acl_temperature must be positive, got {}", self.acl_temperature));
        }
        self.model.encoder.validate().map_err(TrainError::Config)?;
        self.model.parm.validate().map_err(TrainError::Config)?;
        self.augment.validate()?;
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        derive(&[self.seed, INIT_TAG])
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub contrastive: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochLimit,
    Patience,
    TargetReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub stop: StopReason,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "epoch,L,L_BCE,L_C,val_acc,seconds")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.loss, r.bce, r.contrastive, r.val_accuracy, r.seconds
            )?;
        }
        Ok(())
    }
}

pub struct TrainOutcome<T> {
    /// Model holding the best-validation parameters.
    pub model: Model<T>,
    pub history: TrainHistory,
}

/// Augmented view pair for one panel at one epoch.
fn views(panel: &Panel, seed: u64, cfg: &TrainConfig) -> Result<(Panel, Panel), AugmentError> {
    let a = &cfg.augment;
    Ok(match cfg.views {
        Views::Both => (weak_augment(panel, derive(&[seed, 1]), a), strong_augment(panel, derive(&[seed, 2]), a)?),
        Views::WeakOnly => (weak_augment(panel, derive(&[seed, 1]), a), weak_augment(panel, derive(&[seed, 2]), a)),
        Views::StrongOnly => (panel.clone(), mask_only(panel, derive(&[seed, 2]), a)),
    })
}

struct BatchLosses {
    loss: f64,
    bce: f64,
    contrastive: f64,
}

fn train_batch<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    cfg: &TrainConfig,
    panels: &[&Panel],
    epoch: usize,
    batch: usize,
    indices: &[usize],
) -> Result<BatchLosses, TrainError> {
    let use_acl = cfg.contrastive;
    let pairs: Vec<(Panel, Option<Panel>)> = indices
        .par_iter()
        .zip(panels.par_iter())
        .map(|(&i, p)| {
            let seed = derive(&[cfg.seed, epoch as u64, i as u64]);
            if use_acl {
                views(p, seed, cfg).map(|(w, s)| (w, Some(s)))
            } else {
                Ok((weak_augment(p, derive(&[seed, 1]), &cfg.augment), None))
            }
        })
        .collect::<Result<_, AugmentError>>()?;
    let outliers: Vec<usize> = panels.iter().map(|p| p.outlier_index).collect();
    let weak: Vec<&Panel> = pairs.iter().map(|(w, _)| w).collect();

    let mut g = Graph::new();
    let xw = g.input(panels_to_tensor(&weak));
    let fw = model.perception().encode(&mut g, &model.store, xw)?;
    let acl = if use_acl {
        let strong: Vec<&Panel> = pairs.iter().filter_map(|(_, s)| s.as_ref()).collect();
        let xs = g.input(panels_to_tensor(&strong));
        let fs = model.perception().encode(&mut g, &model.store, xs)?;
        let zw = model.perception().project(&mut g, &model.store, fw)?;
        let zs = model.perception().project(&mut g, &model.store, fs)?;
        let c = acl_loss(&mut g, zw, zs, &outliers, cfg.acl_temperature)?;
        Some(if cfg.detach_contrastive { g.detach(c) } else { c })
    } else {
        None
    };
    let mut rng = stream(derive(&[cfg.seed, CONTEXT_TAG, epoch as u64, batch as u64]));
    let fwd = model.reason(&mut g, fw, &mut ContextOrder::Shuffle(&mut rng))?;
    let bce = bce_loss(&mut g, fwd.logits, &outliers, cfg.model.parm.bce_literal)?;
    let total = total_loss(&mut g, bce, acl, cfg.model.parm.lambda)?;

    let scalar = |v| g.value(v).data()[0].as_f64();
    let losses = BatchLosses {
        loss: scalar(total),
        bce: scalar(bce),
        contrastive: acl.map_or(0.0, scalar),
    };
    if !losses.loss.is_finite() || !losses.contrastive.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch,
            batch,
            value: if losses.loss.is_finite() { losses.contrastive } else { losses.loss },
        });
    }
    let grads = g.backward(total)?.dense(&model.store);
    adam.step(&mut model.store, &grads)?;
    Ok(losses)
}

/// Trains from a fresh initialization derived from `cfg.seed`.
pub fn train<T: Scalar>(cfg: &TrainConfig, train_set: &[Panel], val_set: &[Panel]) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), cfg.init_seed()).map_err(TrainError::Config)?;
    train_from(model, cfg, train_set, val_set, |_, _| {})
}

/// Trains `model` in place, calling `on_epoch` after every epoch with the
/// record and the current parameters.
pub fn train_from<T: Scalar>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    train_set: &[Panel],
    val_set: &[Panel],
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<T>),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut adam = AdamState::new(cfg.adam(), &model.store);
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    let mut records = Vec::new();
    let mut stop = StopReason::EpochLimit;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(derive(&[cfg.seed, SHUFFLE_TAG, epoch as u64])));
        let (mut loss, mut bce, mut contrastive) = (0.0, 0.0, 0.0);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let panels: Vec<&Panel> = idx.iter().map(|&i| &train_set[i]).collect();
            let l = train_batch(&mut model, &mut adam, cfg, &panels, epoch, batch, idx)?;
            let w = idx.len() as f64 / train_set.len() as f64;
            loss += w * l.loss;
            bce += w * l.bce;
            contrastive += w * l.contrastive;
        }
        let val = evaluate(&model, val_set, cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            loss,
            bce,
            contrastive,
            val_accuracy: val.accuracy,
            seconds: if cfg.wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&record, &model.store);
        records.push(record);

        if best.as_ref().is_none_or(|b| val.accuracy > b.1) {
            best = Some((epoch, val.accuracy, model.store.clone()));
        }
        let (best_epoch, best_acc, _) = best.as_ref().expect("set above");
        if cfg.target_accuracy.is_some_and(|t| *best_acc >= t) {
            stop = StopReason::TargetReached;
            break;
        }
        if epoch - best_epoch >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }

    let (best_epoch, best_val_accuracy) = match best {
        Some((e, a, params)) => {
            model.load_params(&params)?;
            (Some(e), Some(a))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        history: TrainHistory {
            records,
            best_epoch,
            best_val_accuracy,
            stop,
        },
    })
}

#[cfg(test)]
mod tests;
