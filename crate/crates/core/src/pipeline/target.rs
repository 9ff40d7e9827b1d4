use super::eval::evaluate;
use super::train_loop::{self, LogRow, StepLoss};
use super::TrainConfig;
use crate::adapters::{init_adapter, LoraAdapter};
use crate::autodiff::{Dropout, Graph, Grads, Var};
use crate::data::{build_history_index, entity_universe, sample_history, split, HistoryIndex, Interaction, Side, Split};
use crate::error::{data_err, Result};
use crate::heads::{triplet_var, Fusion, IdEmbeddings, PredictHead, FUSION_PROJ_NAMES};
use crate::optim::{Adam, ParamTable};
use crate::tensor::{cast, derive_seed, derive_seed_path, rng_from_seed, to_f64, Rng, Scalar, TensorHasher};
use crate::textenc::{AdapterRole, EncoderParams, Vocab};
use ndarray::Array2;
use rand::Rng as _;

pub const PRED_HEAD: &str = "head.pred";
pub const USER_TABLE: &str = "ids.user";
pub const ITEM_TABLE: &str = "ids.item";

/// Target-domain model on a frozen (possibly merged) encoder. Only the
/// adapter, the ID tables, the fusion projections and the head are trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel<T: Scalar> {
    pub encoder: EncoderParams<T>,
    pub adapter: LoraAdapter<T>,
    pub ids: IdEmbeddings<T>,
    pub fusion: Fusion<T>,
    /// Width-2d head over `[v_u, v_i]`.
    pub head: PredictHead<T>,
    pub config: TrainConfig,
}

const ADAPTER_STREAM: u64 = 11;
const ID_STREAM: u64 = 12;
const HEAD_STREAM: u64 = 13;
const VAL_STREAM: u64 = 14;

impl<T: Scalar> TargetModel<T> {
    pub fn init(encoder: EncoderParams<T>, users: Vec<String>, items: Vec<String>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let d = encoder.d_model();
        let adapter = init_adapter(
            &encoder,
            &encoder.attach_points(&config.attach),
            config.rank,
            derive_seed(config.seed, ADAPTER_STREAM),
            "target",
        )?;
        Ok(Self {
            adapter,
            ids: IdEmbeddings::init(users, items, d, derive_seed(config.seed, ID_STREAM))?,
            fusion: Fusion::init(config.fusion, d),
            head: PredictHead::init(2 * d, d, derive_seed(config.seed, HEAD_STREAM)),
            encoder,
            config: config.clone(),
        })
    }

    /// Every trainable tensor under its gradient name.
    pub fn trainable_tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = self.adapter.named_tensors();
        out.push((USER_TABLE.to_string(), &self.ids.users));
        out.push((ITEM_TABLE.to_string(), &self.ids.items));
        if let Some(ps) = &self.fusion.projections {
            out.extend(FUSION_PROJ_NAMES.iter().zip(ps).map(|(n, m)| (n.to_string(), m)));
        }
        out.extend(self.head.named_tensors(PRED_HEAD));
        out
    }

    pub fn trainable_checksum(&self) -> String {
        let mut h = TensorHasher::new();
        for (name, m) in self.trainable_tensors() {
            h.update(&name, m);
        }
        h.finish()
    }
}

impl<T: Scalar> ParamTable<T> for TargetModel<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        if name == USER_TABLE {
            return Some(&mut self.ids.users);
        }
        if name == ITEM_TABLE {
            return Some(&mut self.ids.items);
        }
        if let Some(i) = FUSION_PROJ_NAMES.iter().position(|n| *n == name) {
            return self.fusion.projections.as_mut().map(|ps| &mut ps[i]);
        }
        if let Some(suffix) = name.strip_prefix(PRED_HEAD).and_then(|s| s.strip_prefix('.')) {
            return self.head.tensor_mut(suffix);
        }
        self.adapter.tensor_mut(name)
    }
}

/// A target dataset with its split and the training-only history index.
#[derive(Debug, Clone)]
pub struct TargetData<'d> {
    pub data: &'d [Interaction],
    pub split: Split,
    pub index: HistoryIndex,
}

impl<'d> TargetData<'d> {
    pub fn new(data: &'d [Interaction], split: Split, vocab: &Vocab, max_len: usize) -> Self {
        let index = build_history_index(data, &split.train, vocab, max_len);
        Self { data, split, index }
    }
}

/// ID-table row of a negative for anchor `b`: another in-batch entity with a
/// different id, or a random other table row when the batch has none.
fn negative_row(rows: &[usize], b: usize, table_len: usize, rng: &mut Rng) -> usize {
    let own = rows[b];
    let candidates: Vec<usize> = rows.iter().copied().filter(|&r| r != own).collect();
    if !candidates.is_empty() {
        return candidates[rng.random_range(0..candidates.len())];
    }
    if table_len <= 1 {
        return own;
    }
    let r = rng.random_range(0..table_len - 1);
    if r >= own {
        r + 1
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub l_rec: f64,
    /// Zero, and not computed, when the effective contrastive weight is zero.
    pub l_cl: f64,
    pub total: f64,
}

/// `l_rec + λ·l_cl` over one batch and its gradients. Histories, negatives and
/// dropout masks all derive from `seed`.
pub fn target_batch<T: Scalar>(
    model: &TargetModel<T>,
    td: &TargetData<'_>,
    batch: &[usize],
    seed: u64,
    dropout: f64,
) -> Result<(BatchLoss, Grads<T>)> {
    if batch.is_empty() {
        return Err(data_err("empty batch"));
    }
    let cfg = &model.config;
    let lambda = cfg.effective_lambda();
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g, Some((&model.adapter, AdapterRole::Trainable)))?;
    let users = g.param(&model.ids.users, USER_TABLE);
    let items = g.param(&model.ids.items, ITEM_TABLE);
    let fusion = model.fusion.bind(&mut g);
    let head = model.head.bind(&mut g, PRED_HEAD);
    let mut drop_rng = rng_from_seed(derive_seed(seed, 0));
    let mut dr = (dropout > 0.0).then(|| Dropout::new(dropout, &mut drop_rng));
    let mut neg_rng = rng_from_seed(derive_seed(seed, 1));

    let mut user_rows = Vec::with_capacity(batch.len());
    let mut item_rows = Vec::with_capacity(batch.len());
    for &id in batch {
        let x = &td.data[id];
        user_rows.push(model.ids.user_row(&x.user)?);
        item_rows.push(model.ids.item_row(&x.item)?);
    }

    let mut rec = Vec::with_capacity(batch.len());
    let mut cl = Vec::with_capacity(batch.len());
    for (b, &id) in batch.iter().enumerate() {
        let x = &td.data[id];
        let mut side_repr = |g: &mut Graph<'_, T>, side: Side, entity: &str, table: Var, row: usize| -> Result<(Var, Var)> {
            let seqs = sample_history(&td.index, side, entity, cfg.k, Some(id), derive_seed_path(seed, &[2, b as u64, side as u64]));
            let cls = seqs
                .iter()
                .map(|s| enc.forward_cls(g, s, dr.as_mut()))
                .collect::<Result<Vec<_>>>()?;
            let contents = g.concat_rows(&cls);
            let p = g.gather_rows(table, &[row]);
            Ok((p, fusion.forward(g, p, contents)))
        };
        let (p_u, v_u) = side_repr(&mut g, Side::User, &x.user, users, user_rows[b])?;
        let (p_i, v_i) = side_repr(&mut g, Side::Item, &x.item, items, item_rows[b])?;
        let features = g.concat_cols(&[v_u, v_i]);
        let pred = head.forward(&mut g, features, dr.as_mut());
        let y = g.scalar_const(cast(x.rating));
        let diff = g.sub(pred, y);
        rec.push(g.sum_squares(diff));
        if lambda > 0.0 {
            let un = negative_row(&user_rows, b, model.ids.users.nrows(), &mut neg_rng);
            let in_ = negative_row(&item_rows, b, model.ids.items.nrows(), &mut neg_rng);
            let p_u_neg = g.gather_rows(users, &[un]);
            let p_i_neg = g.gather_rows(items, &[in_]);
            cl.push(triplet_var(&mut g, v_i, p_u, p_u_neg, v_u, p_i, p_i_neg, cfg.margin));
        }
    }
    let inv: T = cast(1.0 / batch.len() as f64);
    let rec_sum = g.add_all(&rec);
    let l_rec = g.scale(rec_sum, inv);
    let (total, l_cl) = if lambda > 0.0 {
        let cl_sum = g.add_all(&cl);
        let l_cl = g.scale(cl_sum, inv);
        let weighted = g.scale(l_cl, cast(lambda));
        (g.add(l_rec, weighted), to_f64(g.scalar(l_cl)))
    } else {
        (l_rec, 0.0)
    };
    let loss = BatchLoss {
        l_rec: to_f64(g.scalar(l_rec)),
        l_cl,
        total: to_f64(g.scalar(total)),
    };
    Ok((loss, g.backward(total)))
}

#[derive(Debug, Clone)]
pub struct TargetOutcome<T: Scalar> {
    pub model: TargetModel<T>,
    pub log: Vec<LogRow>,
    pub best_val_mse: Option<f64>,
    pub steps: usize,
    pub split: Split,
}

/// Splits the dataset 8:1:1 with the config seed, then trains with early
/// stopping on validation MSE. ID tables cover every entity in `data`.
pub fn train_target<T: Scalar>(
    data: &[Interaction],
    encoder: &EncoderParams<T>,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TargetOutcome<T>> {
    if data.is_empty() {
        return Err(data_err("target dataset is empty"));
    }
    let parts = split(data.len(), config.seed)?;
    let td = TargetData::new(data, parts, vocab, encoder.config.max_len);
    fit_target(&td, encoder, config)
}

pub fn fit_target<T: Scalar>(td: &TargetData<'_>, encoder: &EncoderParams<T>, config: &TrainConfig) -> Result<TargetOutcome<T>> {
    config.validate()?;
    if td.split.train.is_empty() {
        return Err(data_err("target training split is empty"));
    }
    let (users, items) = entity_universe(td.data);
    let mut model = TargetModel::init(encoder.clone(), users, items, config)?;
    let mut adam = Adam::new(config.lr);
    let val_seed = derive_seed(config.seed, VAL_STREAM);
    let res = train_loop::run(
        &mut model,
        &td.split.train,
        config,
        "target",
        |m, batch, seed| {
            let (loss, grads) = target_batch(m, td, batch, seed, config.dropout)?;
            adam.step(&grads, m);
            Ok(StepLoss {
                l_rec: loss.l_rec,
                l_cl: loss.l_cl,
                total: loss.total,
            })
        },
        |m| {
            if td.split.val.is_empty() {
                Ok(None)
            } else {
                Ok(Some(evaluate(m, td.data, &td.index, &td.split.val, 1, val_seed)?.mean_mse))
            }
        },
    )?;
    Ok(TargetOutcome {
        model,
        log: res.log,
        best_val_mse: res.best_val,
        steps: res.steps,
        split: td.split.clone(),
    })
}
