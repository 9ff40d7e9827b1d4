use super::eval::evaluate;
use super::source::pretrain_source;
use super::target::{fit_target, TargetData};
use super::TrainConfig;
use crate::adapters::{dare_merge, LoraAdapter, MergeSpec};
use crate::data::{split, Interaction};
use crate::error::{config_err, Result};
use crate::tensor::{derive_seed, Scalar};
use crate::textenc::{EncoderParams, Vocab};
use serde::{Deserialize, Serialize};

pub struct SourceDomain<'a> {
    pub label: String,
    pub data: &'a [Interaction],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    /// Labels of the merged source adapters; empty for the unmerged base.
    pub sources: Vec<String>,
    /// Mean over `eval_repeats` history resamples, like `test_mse`.
    pub val_mse: f64,
    pub test_mse: f64,
    pub test_per_repeat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    pub fn baseline(&self) -> Option<&TransferRow> {
        self.rows.iter().find(|r| r.sources.is_empty())
    }
}

pub const MAX_TRANSFER_SOURCES: usize = 6;
const MERGE_STREAM: u64 = 0x4d52;
const TEST_STREAM: u64 = 0x5445;
const VAL_STREAM: u64 = 0x5641;

/// Source seeds are derived per source so two sources never share an init.
pub fn source_config(config: &TrainConfig, index: usize) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(config.seed, 0x5352_0000 + index as u64),
        ..config.clone()
    }
}

pub fn merge_seed(config: &TrainConfig) -> u64 {
    derive_seed(config.seed, MERGE_STREAM)
}

pub fn val_seed(config: &TrainConfig) -> u64 {
    derive_seed(config.seed, VAL_STREAM)
}

pub fn test_seed(config: &TrainConfig) -> u64 {
    derive_seed(config.seed, TEST_STREAM)
}

/// Pretrains each source once, then for every subset of sources (the empty
/// subset first) merges, trains on the target and scores val and test.
pub fn run_transfer_experiment<T: Scalar>(
    sources: &[SourceDomain<'_>],
    target: &[Interaction],
    base: &EncoderParams<T>,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TransferReport> {
    config.validate()?;
    if sources.len() > MAX_TRANSFER_SOURCES {
        return Err(config_err(format!(
            "at most {MAX_TRANSFER_SOURCES} sources, got {}",
            sources.len()
        )));
    }
    let adapters: Vec<LoraAdapter<T>> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(pretrain_source(s.data, base, vocab, &source_config(config, i), &s.label)?.model.adapter))
        .collect::<Result<_>>()?;
    let td = TargetData::new(target, split(target.len(), config.seed)?, vocab, base.config.max_len);
    let mut rows = Vec::new();
    for mask in 0u32..(1 << sources.len()) {
        let chosen: Vec<usize> = (0..sources.len()).filter(|i| mask & (1 << i) != 0).collect();
        let merged = if chosen.is_empty() {
            base.clone()
        } else {
            let spec = MergeSpec {
                p: config.p,
                seed: merge_seed(config),
                adapters: chosen.iter().map(|&i| &adapters[i]).collect(),
            };
            dare_merge(base, &spec)?
        };
        let out = fit_target(&td, &merged, config)?;
        let val = evaluate(&out.model, target, &td.index, &td.split.val, config.eval_repeats, val_seed(config))?;
        let test = evaluate(&out.model, target, &td.index, &td.split.test, config.eval_repeats, test_seed(config))?;
        let row = TransferRow {
            sources: chosen.iter().map(|&i| sources[i].label.clone()).collect(),
            val_mse: val.mean_mse,
            test_mse: test.mean_mse,
            test_per_repeat: test.per_repeat,
        };
        tracing::info!(sources = ?row.sources, val = row.val_mse, test = row.test_mse, "transfer row");
        rows.push(row);
    }
    Ok(TransferReport { rows })
}
