use super::TrainConfig;
use crate::error::Result;
use crate::tensor::{derive_seed_path, rng_from_seed};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// One optimizer step. `val_mse` is set on the last step of each epoch that
/// ran a validation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_rec: f64,
    pub l_cl: f64,
    pub total: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub l_rec: f64,
    pub l_cl: f64,
    pub total: f64,
}

/// Mean `total` per epoch, in epoch order.
pub fn epoch_means(log: &[LogRow]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for row in log {
        if out.len() <= row.epoch {
            out.resize(row.epoch + 1, (0.0, 0));
        }
        out[row.epoch].0 += row.total;
        out[row.epoch].1 += 1;
    }
    out.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
}

pub(crate) struct LoopResult {
    pub log: Vec<LogRow>,
    pub best_val: Option<f64>,
    pub steps: usize,
}

const SHUFFLE_STREAM: u64 = 0x5348;
const STEP_STREAM: u64 = 0x5354;

/// Epoch loop with seeded shuffling, a global step cap and early stopping on
/// validation MSE. On return `model` holds the lowest-validation snapshot when
/// validation ran, the final state otherwise.
pub(crate) fn run<M: Clone>(
    model: &mut M,
    train: &[usize],
    config: &TrainConfig,
    stage: &str,
    mut step: impl FnMut(&mut M, &[usize], u64) -> Result<StepLoss>,
    mut validate: impl FnMut(&M) -> Result<Option<f64>>,
) -> Result<LoopResult> {
    let mut log = Vec::new();
    let mut steps = 0usize;
    let mut best: Option<(f64, M)> = None;
    let mut stale = 0usize;
    let cap = config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut rng_from_seed(derive_seed_path(config.seed, &[SHUFFLE_STREAM, epoch as u64])));
        let mut ran = false;
        for batch in order.chunks(config.batch_size) {
            if steps >= cap {
                break;
            }
            let loss = step(model, batch, derive_seed_path(config.seed, &[STEP_STREAM, steps as u64]))?;
            log.push(LogRow {
                epoch,
                step: steps,
                l_rec: loss.l_rec,
                l_cl: loss.l_cl,
                total: loss.total,
                val_mse: None,
            });
            steps += 1;
            ran = true;
        }
        if !ran {
            break;
        }
        let val = validate(model)?;
        if let Some(v) = val {
            log.last_mut().expect("ran a step").val_mse = Some(v);
            tracing::info!(stage, epoch, steps, val_mse = v, "epoch done");
            match &best {
                Some((b, _)) if v >= *b => {
                    stale += 1;
                    if stale >= config.patience {
                        break 'epochs;
                    }
                }
                _ => {
                    best = Some((v, model.clone()));
                    stale = 0;
                }
            }
        } else {
            tracing::info!(stage, epoch, steps, "epoch done");
        }
        if steps >= cap {
            break;
        }
    }
    let best_val = best.as_ref().map(|(v, _)| *v);
    if let Some((_, snapshot)) = best {
        *model = snapshot;
    }
    Ok(LoopResult { log, best_val, steps })
}
