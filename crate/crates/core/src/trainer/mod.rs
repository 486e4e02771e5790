//! Training and evaluation.
//!
//! Each batch computes per-sample losses and gradients in parallel over
//! shared read-only parameters. Gradients are summed in batch order, so
//! the update does not depend on scheduling. The batch loss is the mean
//! per-step cross-entropy over all supervised steps in the batch, which is
//! what right-padding with masked pads would compute.

pub mod adam;
pub mod eval;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use crate::config::TrainConfig;
use crate::datasynth::Sample;
use crate::error::{Error, Result};
use crate::model::{checkpoint, Model};
use crate::numerics::Gradients;
use crate::parallel;
use crate::rng::{derive_seed, index_seed, SplitMix64};
pub use adam::{adam_step, AdamHyper, AdamState};
pub use eval::{evaluate, normalize, predict, EvalResult, EvalRow};

pub const METRICS_HEADER: &str = "epoch,step,loss,train_acc,val_acc,lr,seconds";

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Mean per-step training loss over the epoch.
    pub loss: f64,
    pub train_acc: f64,
    /// `None` without a validation set.
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRow {
    fn csv(&self, wall_time: bool) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.train_acc,
            self.val_acc.map_or(String::new(), |v| v.to_string()),
            self.lr,
            if wall_time { self.seconds } else { 0.0 }
        )
    }
}

/// Result of [`train`]. The model passed in holds the last-epoch weights.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    /// Epoch with the best validation accuracy (training accuracy when
    /// there is no validation set); the earliest one wins ties.
    pub best_epoch: usize,
    pub best_model: Model,
}

/// Renders rows as the metrics CSV.
pub fn metrics_csv(rows: &[EpochRow], wall_time: bool) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv(wall_time));
    }
    out
}

/// Summed gradient, summed loss and supervised step count of a batch.
pub fn batch_gradients(model: &Model, batch: &[&Sample]) -> Result<(Gradients, f64, usize)> {
    let parts = parallel::map_ordered(batch, |s| model.loss_and_grads(&s.image, &s.label));
    let mut grads = Gradients::new();
    let (mut loss, mut steps) = (0.0, 0);
    for part in parts {
        let part = part?;
        grads.add_assign(&part.grads);
        loss += part.loss_sum;
        steps += part.steps;
    }
    Ok((grads, loss, steps))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `model` in place with Adam and a seeded per-epoch shuffle.
///
/// With `out` set, writes `metrics.csv` (rewritten after every epoch),
/// `timing.csv`, `best.ckpt` and `last.ckpt` there.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = AdamState::default();
    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut timing = String::from("epoch,train_seconds,eval_seconds\n");
    let mut best: Option<(f64, usize, Model)> = None;
    let acc_subset = &train_set[..cfg.train_acc_samples.unwrap_or(train_set.len()).min(train_set.len())];

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let hyper = AdamHyper {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        let shuffle_seed = derive_seed(cfg.seed, &format!("train.shuffle.{epoch}"));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        SplitMix64::new(shuffle_seed).shuffle(&mut order);

        let (mut epoch_loss, mut epoch_steps) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = index_seed(shuffle_seed, b as u64);
            let numeric = |detail: String| Error::Numeric {
                name: "loss".into(),
                detail: format!("epoch {epoch}, batch {b} (batch seed {batch_seed:#018x}): {detail}"),
            };
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (mut grads, loss, steps) = batch_gradients(model, &batch).map_err(|e| match e {
                Error::Numeric { detail, .. } => numeric(detail),
                other => other,
            })?;
            grads.scale(1.0 / steps as f64);
            let norm = grads.global_norm();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(numeric(format!("loss {loss}, gradient norm {norm}")));
            }
            if let Some(clip) = cfg.clip_norm {
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam_step(&mut model.params, &grads, &mut state, &hyper)?;
            epoch_loss += loss;
            epoch_steps += steps;
        }
        let train_seconds = started.elapsed().as_secs_f64();

        let eval_started = Instant::now();
        let train_acc = evaluate(model, acc_subset, cfg.case_sensitive)?.accuracy();
        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set, cfg.case_sensitive)?.accuracy())
        };
        let eval_seconds = eval_started.elapsed().as_secs_f64();
        let row = EpochRow {
            epoch,
            step: state.steps,
            loss: epoch_loss / epoch_steps as f64,
            train_acc,
            val_acc,
            lr,
            seconds: train_seconds + eval_seconds,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} val_acc {} lr {lr:e} ({:.1}s)",
            row.loss,
            row.train_acc,
            val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            row.seconds
        );
        let _ = writeln!(timing, "{epoch},{train_seconds:.3},{eval_seconds:.3}");
        let score = val_acc.unwrap_or(train_acc);
        let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
        let meta = json!({
            "epoch": epoch,
            "step": state.steps,
            "train_acc": train_acc,
            "val_acc": val_acc,
            "seed": cfg.seed,
        });
        rows.push(row);
        if let Some(dir) = out {
            write_file(&dir.join("metrics.csv"), &metrics_csv(&rows, cfg.log_wall_time))?;
            write_file(&dir.join("timing.csv"), &timing)?;
            checkpoint::save(&dir.join("last.ckpt"), model, &meta)?;
            if improved {
                checkpoint::save(&dir.join("best.ckpt"), model, &meta)?;
            }
        }
        if improved {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        rows,
        best_epoch,
        best_model,
    })
}
