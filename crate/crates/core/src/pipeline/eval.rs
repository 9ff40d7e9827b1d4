use super::TargetModel;
use crate::adapters::fold_adapter;
use crate::data::{HistoryIndex, Interaction, Side};
use crate::error::{data_err, Result};
use crate::tensor::{derive_seed, derive_seed_path, to_f64, Scalar};
use crate::textenc::{encode, TokenSeq};
use ndarray::{concatenate, Array1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub repeat: usize,
    pub interaction: usize,
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub raw: f64,
    /// `raw` clamped to `[1, 5]`.
    pub clamped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Arithmetic mean of `per_repeat`; raw predictions.
    pub mean_mse: f64,
    pub per_repeat: Vec<f64>,
    pub mean_clamped_mse: f64,
    pub per_repeat_clamped: Vec<f64>,
    pub predictions: Vec<PredictionRow>,
}

/// Squared-error mean in row order, the aggregation every report uses.
pub fn mse_of(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (pred, y) in pairs {
        sum += (pred - y) * (pred - y);
        n += 1;
    }
    sum / n as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Scores `ids` `repeats` times, each repeat resampling histories from its own
/// derived seed. Dropout is off and the model is only read. Training-review
/// embeddings are computed once and shared by all repeats.
pub fn evaluate<T: Scalar>(
    model: &TargetModel<T>,
    data: &[Interaction],
    index: &HistoryIndex,
    ids: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(data_err("cannot evaluate an empty split"));
    }
    if repeats == 0 {
        return Err(data_err("eval_repeats must be at least 1"));
    }
    let folded = fold_adapter(&model.encoder, &model.adapter)?;
    let k = model.config.k;

    let mut needed: Vec<(usize, &TokenSeq)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &id in ids {
        let x = &data[id];
        for (side, entity) in [(Side::User, &x.user), (Side::Item, &x.item)] {
            for e in index.entries(side, entity) {
                if seen.insert(e.interaction) {
                    needed.push((e.interaction, &e.tokens));
                }
            }
        }
    }
    let cache: HashMap<usize, Array1<T>> = needed
        .par_iter()
        .map(|(i, seq)| Ok((*i, encode(seq, &folded, None)?)))
        .collect::<Result<_>>()?;
    let placeholder = encode(&TokenSeq::placeholder(index.max_len()), &folded, None)?;

    let fuse_side = |side: Side, entity: &str, row: Array1<T>, id: usize, rseed: u64, j: usize| -> Result<Array1<T>> {
        let entries = index.entries(side, entity);
        let contents: Vec<Array1<T>> = index
            .sample_positions(side, entity, k, Some(id), derive_seed_path(rseed, &[j as u64, side as u64]))
            .into_iter()
            .map(|p| match p {
                Some(pos) => cache[&entries[pos].interaction].clone(),
                None => placeholder.clone(),
            })
            .collect();
        model.fusion.fuse(&row, &contents)
    };

    let runs: Vec<Vec<PredictionRow>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let rseed = derive_seed(seed, r as u64);
            ids.iter()
                .enumerate()
                .map(|(j, &id)| {
                    let x = &data[id];
                    let urow = model.ids.users.row(model.ids.user_row(&x.user)?).to_owned();
                    let irow = model.ids.items.row(model.ids.item_row(&x.item)?).to_owned();
                    let v_u = fuse_side(Side::User, &x.user, urow, id, rseed, j)?;
                    let v_i = fuse_side(Side::Item, &x.item, irow, id, rseed, j)?;
                    let features = concatenate(Axis(0), &[v_u.view(), v_i.view()]).expect("same rank");
                    let raw = to_f64(model.head.predict(&features)?);
                    Ok(PredictionRow {
                        repeat: r,
                        interaction: id,
                        user: x.user.clone(),
                        item: x.item.clone(),
                        rating: x.rating,
                        raw,
                        clamped: raw.clamp(1.0, 5.0),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let per_repeat: Vec<f64> = runs.iter().map(|rows| mse_of(rows.iter().map(|p| (p.raw, p.rating)))).collect();
    let per_repeat_clamped: Vec<f64> = runs
        .iter()
        .map(|rows| mse_of(rows.iter().map(|p| (p.clamped, p.rating))))
        .collect();
    Ok(EvalReport {
        mean_mse: mean(&per_repeat),
        mean_clamped_mse: mean(&per_repeat_clamped),
        per_repeat,
        per_repeat_clamped,
        predictions: runs.into_iter().flatten().collect(),
    })
}
