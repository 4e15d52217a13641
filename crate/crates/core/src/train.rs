//! Mini-batch Adam training with validation-based early stopping.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricConfig};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::module_norms;
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Samples whose gradients are averaged into one update.
    pub accumulate: usize,
    /// Epochs without a validation ADE improvement before stopping.
    pub patience: usize,
    /// Rescale the averaged gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Visit only this many shuffled training samples per epoch.
    pub samples_per_epoch: Option<usize>,
    pub metrics: MetricConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 50,
            accumulate: 16,
            patience: 10,
            clip_norm: None,
            samples_per_epoch: None,
            metrics: MetricConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.accumulate == 0 || self.patience == 0 {
            return Err(Error::Config("accumulate and patience must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) || self.samples_per_epoch == Some(0) {
            return Err(Error::Config("clip_norm and samples_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss of the samples visited this epoch, each taken before the
    /// update it contributed to.
    pub train_loss: f64,
    pub val_ade: Option<f64>,
    pub val_fde: Option<f64>,
    pub val_nade: Option<f64>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_ade,val_fde,val_nade,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            o(self.val_ade),
            o(self.val_fde),
            o(self.val_nade),
            self.seconds
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without a
    /// validation split, the initialization for zero epochs).
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Train `model` on `train`, scoring `val` after every epoch.
///
/// Shuffling draws from the `shuffle` substream of `seed`, so two calls
/// with equal inputs produce bit-identical results. `on_epoch` sees each
/// log row with the current parameters and may end training early.
pub fn train(
    mut model: Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    info!(
        "training {} ({} parameters) on {} samples, {} validation",
        model.config.variant,
        model.param_count(),
        train.len(),
        val.len()
    );
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut last_update: Option<String> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(seed, "shuffle", epoch as u64));
        if let Some(n) = cfg.samples_per_epoch {
            order.truncate(n);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.accumulate) {
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in chunk {
                let (loss, grads, _) = model.loss_and_grads(&train[i]).map_err(|e| match e {
                    // forward pass failed before any gradient existed
                    Error::Numeric(m) if !m.contains("norms:") => Error::Numeric(format!(
                        "{m} on sample {} in epoch {epoch}; previous update {}; parameter {}",
                        train[i].id,
                        last_update.as_deref().unwrap_or("none"),
                        describe_norms(model.params.iter())
                    )),
                    other => other,
                })?;
                total += loss;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut norm_sq = 0.0;
            for g in sum.values_mut() {
                g.scale_assign(scale);
                norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            if !norm_sq.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in epoch {epoch}; gradient {}",
                    describe_norms(&sum)
                )));
            }
            if let Some(clip) = cfg.clip_norm {
                let norm = norm_sq.sqrt();
                if norm > clip {
                    sum.values_mut().for_each(|g| g.scale_assign(clip / norm));
                }
            }
            adam.step(&mut model.params, &sum);
            last_update = Some(describe_norms(&sum));
        }
        let train_loss = total / order.len() as f64;

        let (val_ade, val_fde, val_nade) = if val.is_empty() {
            (None, None, None)
        } else {
            let (report, _) = evaluate(&model, val, &cfg.metrics)?;
            (Some(report.ade), Some(report.fde), report.nade)
        };
        let row = EpochLog {
            epoch,
            train_loss,
            val_ade,
            val_fde,
            val_nade,
            seconds: start.elapsed().as_secs_f64(),
        };
        debug!("{}", row.csv_row());
        let flow = on_epoch(&row, &model);
        log.push(row);

        let score = val_ade.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if score >= *b && val_ade.is_some() => {
                stale += 1;
                if stale >= cfg.patience {
                    info!("no validation improvement for {stale} epochs, stopping at epoch {epoch}");
                    stopped_early = true;
                    break;
                }
            }
            _ => {
                stale = 0;
                best = Some((score, epoch, model.clone()));
            }
        }
        if flow.is_break() {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        stopped_early,
    })
}

/// `module=norm` pairs for a diagnostic message.
pub fn describe_norms<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> String {
    let parts: Vec<String> = module_norms(tensors)
        .into_iter()
        .map(|(m, n)| format!("{m}={n:.3e}"))
        .collect();
    format!("norms: {}", parts.join(", "))
}

/// Mean ADE of `model` over `samples` in normalized units.
pub fn normalized_ade(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += crate::metrics::ade(&model.predict(s)?, s.future())?;
    }
    Ok(total / samples.len() as f64)
}
