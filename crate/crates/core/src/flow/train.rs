//! Maximum-likelihood training with Adam, global-norm clipping, a held-out
//! validation split and early stopping on validation NLL.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{FlowConfig, FlowModel};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, AdamConfig, AdamState};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub clip_norm: f64,
    /// Upper bound on the rows used for actnorm initialization.
    pub init_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr: AdamConfig::default().lr,
            seed: 0,
            validation_fraction: 0.1,
            patience: 10,
            clip_norm: 5.0,
            init_samples: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch NLL over the epoch (epoch 0: full training split).
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stopped_early: bool,
    /// Set when training aborted on a non-finite loss or gradient.
    pub diverged: Option<String>,
    pub train_count: usize,
    pub val_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Snapshot with the lowest validation NLL.
    pub model: FlowModel<T>,
    pub log: TrainLog,
}

fn gather<T: Real>(data: &[T], dim: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }
    out
}

fn mean_nll<T: Real>(model: &FlowModel<T>, rows: &[T], n: usize) -> Result<f64> {
    let lp = model.log_prob_rows(rows, n)?;
    Ok(-lp.iter().sum::<f64>() / n as f64)
}

fn all_identical<T: Real>(data: &[T], dim: usize) -> bool {
    let first = &data[..dim];
    data.chunks_exact(dim).all(|row| row == first)
}

/// Fits a fresh flow built from `flow` to the `n × dim` rows in `data`.
pub fn train_flow<T: Real>(flow: FlowConfig, data: &[T], n: usize, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let dim = flow.dim;
    if data.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: n * dim,
            actual: data.len(),
            context: "training rows",
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "validation fraction {} outside (0, 1)",
            cfg.validation_fraction
        )));
    }
    if n < 2 * cfg.batch_size {
        return Err(Error::InsufficientSamples(format!(
            "{n} samples; training needs at least 2 × batch size = {}",
            2 * cfg.batch_size
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    if all_identical(data, dim) {
        return Err(Error::Degenerate(
            "all training vectors are identical; the likelihood is unbounded".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((cfg.validation_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_rows = gather(data, dim, val_idx);
    let train_rows = gather(data, dim, &train_idx);
    let n_train = train_idx.len();

    let mut model = FlowModel::<T>::new(flow)?;
    let n_init = n_train.min(cfg.init_samples.max(2));
    model.initialize(&train_rows[..n_init * dim], n_init)?;

    let mut log = TrainLog {
        train_count: n_train,
        val_count: n_val,
        ..TrainLog::default()
    };
    let init_val = mean_nll(&model, &val_rows, n_val)?;
    let init_train = mean_nll(&model, &train_rows, n_train)?;
    log.records.push(EpochRecord {
        epoch: 0,
        train_nll: init_train,
        val_nll: init_val,
    });
    log.best_val_nll = init_val;
    let mut best = model.clone();

    let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut adam = AdamState::<T>::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &shapes,
    )?;

    let mut since_best = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in train_idx.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let rows = gather(data, dim, batch);
            let (nll, mut grads) = match model.nll_and_grads(&rows, batch.len()) {
                Ok(v) => v,
                Err(e @ (Error::NonFiniteLayer { .. } | Error::NonFinite(_))) => {
                    log.diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !nll.is_finite() {
                log.diverged = Some(format!("epoch {epoch}: non-finite batch NLL"));
                break 'epochs;
            }
            clip_global_norm(&mut grads.slices_mut(), cfg.clip_norm);
            let g = grads.slices();
            let mut params = model.param_slices_mut();
            if let Err(e) = adam.update(&mut params, &g) {
                log.diverged = Some(format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
            loss_sum += nll;
            batches += 1;
        }
        let val = match mean_nll(&model, &val_rows, n_val) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFiniteLayer { .. }) | Err(Error::NonFinite(_)) => {
                log.diverged = Some(format!("epoch {epoch}: non-finite validation NLL"));
                break;
            }
            Err(e) => return Err(e),
        };
        let train_nll = loss_sum / batches.max(1) as f64;
        info!("epoch {epoch}: train nll {train_nll:.4}, val nll {val:.4}");
        log.records.push(EpochRecord {
            epoch,
            train_nll,
            val_nll: val,
        });
        if val < log.best_val_nll {
            log.best_val_nll = val;
            log.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some(reason) = &log.diverged {
        warn!("training diverged ({reason}); returning epoch {} snapshot", log.best_epoch);
    }
    Ok(TrainOutcome { model: best, log })
}
