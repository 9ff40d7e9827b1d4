use super::train_loop::{self, LogRow, StepLoss};
use super::TrainConfig;
use crate::adapters::{fold_adapter, init_adapter, LoraAdapter};
use crate::autodiff::{Dropout, Graph, Grads};
use crate::data::{split, Interaction, Split};
use crate::error::{data_err, Result};
use crate::heads::PredictHead;
use crate::optim::{Adam, ParamTable};
use crate::tensor::{cast, derive_seed, rng_from_seed, to_f64, Scalar};
use crate::textenc::{encode, tokenize, AdapterRole, EncoderParams, TokenSeq, Vocab};
use ndarray::Array2;

pub const SOURCE_HEAD: &str = "head.src";

/// Trainable state of source pretraining: the adapter and a width-d head.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel<T: Scalar> {
    pub adapter: LoraAdapter<T>,
    pub head: PredictHead<T>,
}

impl<T: Scalar> ParamTable<T> for SourceModel<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        match name.strip_prefix(SOURCE_HEAD).and_then(|s| s.strip_prefix('.')) {
            Some(suffix) => self.head.tensor_mut(suffix),
            None => self.adapter.tensor_mut(name),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T: Scalar> {
    pub model: SourceModel<T>,
    pub log: Vec<LogRow>,
    pub best_val_mse: Option<f64>,
    pub steps: usize,
    pub split: Option<Split>,
}

const ADAPTER_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

pub fn init_source_model<T: Scalar>(base: &EncoderParams<T>, config: &TrainConfig, label: &str) -> Result<SourceModel<T>> {
    let d = base.d_model();
    Ok(SourceModel {
        adapter: init_adapter(
            base,
            &base.attach_points(&config.attach),
            config.rank,
            derive_seed(config.seed, ADAPTER_STREAM),
            label,
        )?,
        head: PredictHead::init(d, d, derive_seed(config.seed, HEAD_STREAM)),
    })
}

/// Trains an adapter on a source domain's 8:1:1 training split, early-stopping
/// on the validation split. `base` is only read.
pub fn pretrain_source<T: Scalar>(
    data: &[Interaction],
    base: &EncoderParams<T>,
    vocab: &Vocab,
    config: &TrainConfig,
    label: &str,
) -> Result<PretrainOutcome<T>> {
    if data.is_empty() {
        return Err(data_err("source dataset is empty"));
    }
    let parts = split(data.len(), config.seed)?;
    let mut out = fit_source(data, &parts.train, &parts.val, base, vocab, config, label)?;
    out.split = Some(parts);
    Ok(out)
}

/// Pretraining on explicit training and validation ids. An empty `val` skips
/// validation and keeps the final state.
pub fn fit_source<T: Scalar>(
    data: &[Interaction],
    train: &[usize],
    val: &[usize],
    base: &EncoderParams<T>,
    vocab: &Vocab,
    config: &TrainConfig,
    label: &str,
) -> Result<PretrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(data_err("source training set is empty"));
    }
    let max_len = base.config.max_len;
    let seqs: Vec<TokenSeq> = data.iter().map(|x| tokenize(&x.text, vocab, max_len)).collect();
    let mut model = init_source_model(base, config, label)?;
    let mut adam = Adam::new(config.lr);
    let res = train_loop::run(
        &mut model,
        train,
        config,
        "pretrain",
        |m, batch, seed| {
            let (loss, grads) = source_batch(m, base, data, &seqs, batch, config.dropout, seed)?;
            adam.step(&grads, m);
            Ok(StepLoss {
                l_rec: loss,
                l_cl: 0.0,
                total: loss,
            })
        },
        |m| {
            if val.is_empty() {
                Ok(None)
            } else {
                source_mse(m, base, data, &seqs, val).map(Some)
            }
        },
    )?;
    Ok(PretrainOutcome {
        model,
        log: res.log,
        best_val_mse: res.best_val,
        steps: res.steps,
        split: None,
    })
}

/// Batch MSE of predicting each rating from its own review, with gradients
/// for the adapter and the head.
pub fn source_batch<T: Scalar>(
    model: &SourceModel<T>,
    base: &EncoderParams<T>,
    data: &[Interaction],
    seqs: &[TokenSeq],
    batch: &[usize],
    dropout: f64,
    seed: u64,
) -> Result<(f64, Grads<T>)> {
    let mut g = Graph::new();
    let enc = base.bind(&mut g, Some((&model.adapter, AdapterRole::Trainable)))?;
    let head = model.head.bind(&mut g, SOURCE_HEAD);
    let mut rng = rng_from_seed(seed);
    let mut dr = (dropout > 0.0).then(|| Dropout::new(dropout, &mut rng));
    let mut terms = Vec::with_capacity(batch.len());
    for &id in batch {
        let cls = enc.forward_cls(&mut g, &seqs[id], dr.as_mut())?;
        let pred = head.forward(&mut g, cls, dr.as_mut());
        let y = g.scalar_const(cast(data[id].rating));
        let diff = g.sub(pred, y);
        terms.push(g.sum_squares(diff));
    }
    let sum = g.add_all(&terms);
    let loss = g.scale(sum, cast(1.0 / batch.len() as f64));
    Ok((to_f64(g.scalar(loss)), g.backward(loss)))
}

/// Dropout-free MSE over `ids`.
pub fn source_mse<T: Scalar>(
    model: &SourceModel<T>,
    base: &EncoderParams<T>,
    data: &[Interaction],
    seqs: &[TokenSeq],
    ids: &[usize],
) -> Result<f64> {
    if ids.is_empty() {
        return Err(data_err("cannot score an empty set"));
    }
    let folded = fold_adapter(base, &model.adapter)?;
    let mut sum = 0.0;
    for &id in ids {
        let cls = encode(&seqs[id], &folded, None)?;
        let pred = to_f64(model.head.predict(&cls)?);
        sum += (pred - data[id].rating).powi(2);
    }
    Ok(sum / ids.len() as f64)
}
