//! ID embeddings, attention fusion, prediction MLPs and the three losses.
//!
//! Every computation exists twice: a plain function on vectors for inference
//! and inspection, and a graph builder used during training. Tests tie the two
//! together.

use crate::autodiff::{Dropout, Graph, Var};
use crate::error::{config_err, data_err, shape_err, LoidError, Result};
use crate::format::TensorFile;
use crate::tensor::{cast, derive_seed, gaussian, rng_from_seed, to_f64, Scalar};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Trainable user and item tables (`p_u`, `p_i`), one row per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdEmbeddings<T: Scalar> {
    pub users: Array2<T>,
    pub items: Array2<T>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

pub const ID_INIT_STD: f64 = 0.1;

fn index_of(ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(data_err(format!("duplicate entity id `{id}`")));
        }
    }
    Ok(map)
}

impl<T: Scalar> IdEmbeddings<T> {
    pub fn init(user_ids: Vec<String>, item_ids: Vec<String>, d: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(derive_seed(seed, 0x4944));
        let users = gaussian(user_ids.len(), d, ID_INIT_STD, &mut rng);
        let items = gaussian(item_ids.len(), d, ID_INIT_STD, &mut rng);
        Self::from_tables(user_ids, item_ids, users, items)
    }

    pub fn from_tables(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        users: Array2<T>,
        items: Array2<T>,
    ) -> Result<Self> {
        if users.nrows() != user_ids.len() || items.nrows() != item_ids.len() {
            return Err(shape_err(format!(
                "ID tables have {}/{} rows for {}/{} entities",
                users.nrows(),
                items.nrows(),
                user_ids.len(),
                item_ids.len()
            )));
        }
        if users.ncols() != items.ncols() {
            return Err(shape_err("user and item tables differ in width"));
        }
        Ok(Self {
            user_index: index_of(&user_ids)?,
            item_index: index_of(&item_ids)?,
            users,
            items,
            user_ids,
            item_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_row(&self, id: &str) -> Result<usize> {
        self.user_index.get(id).copied().ok_or_else(|| LoidError::UnknownEntity {
            kind: "user",
            id: id.to_string(),
        })
    }

    pub fn item_row(&self, id: &str) -> Result<usize> {
        self.item_index.get(id).copied().ok_or_else(|| LoidError::UnknownEntity {
            kind: "item",
            id: id.to_string(),
        })
    }
}

/// `input → hidden (GELU) → scalar`, weights stored `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictHead<T: Scalar> {
    pub w1: Array2<T>,
    pub b1: Array2<T>,
    pub w2: Array2<T>,
    pub b2: Array2<T>,
}

impl<T: Scalar> PredictHead<T> {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, 0x4845));
        Self {
            w1: gaussian(hidden, input, (input as f64).powf(-0.5), &mut rng),
            b1: Array2::zeros((1, hidden)),
            w2: gaussian(1, hidden, (hidden as f64).powf(-0.5), &mut rng),
            b2: Array2::zeros((1, 1)),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((1, hidden)),
            b2: Array2::zeros((1, 1)),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Array2<T>)> {
        vec![
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }

    pub fn tensor_mut(&mut self, suffix: &str) -> Option<&mut Array2<T>> {
        match suffix {
            "w1" => Some(&mut self.w1),
            "b1" => Some(&mut self.b1),
            "w2" => Some(&mut self.w2),
            "b2" => Some(&mut self.b2),
            _ => None,
        }
    }

    pub fn from_file(f: &TensorFile, prefix: &str) -> Result<Self> {
        let m = |n: &str| f.matrix::<T>(&format!("{prefix}.{n}"));
        let head = Self {
            w1: m("w1")?,
            b1: m("b1")?,
            w2: m("w2")?,
            b2: m("b2")?,
        };
        let h = head.w1.nrows();
        if head.b1.dim() != (1, h) || head.w2.dim() != (1, h) || head.b2.dim() != (1, 1) {
            return Err(LoidError::Format(format!("head `{prefix}` has inconsistent shapes")));
        }
        Ok(head)
    }

    /// Binds the head weights into `g` as parameters named `{prefix}.w1` etc.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, prefix: &str) -> HeadVars {
        HeadVars {
            w1: g.param(&self.w1, &format!("{prefix}.w1")),
            b1: g.param(&self.b1, &format!("{prefix}.b1")),
            w2: g.param(&self.w2, &format!("{prefix}.w2")),
            b2: g.param(&self.b2, &format!("{prefix}.b2")),
        }
    }

    /// Deterministic scalar estimate for one feature vector.
    pub fn predict(&self, features: &Array1<T>) -> Result<T> {
        if features.len() != self.input_width() {
            return Err(shape_err(format!(
                "head expects {} features, got {}",
                self.input_width(),
                features.len()
            )));
        }
        let mut g = Graph::new();
        let vars = HeadVars {
            w1: g.constant(&self.w1),
            b1: g.constant(&self.b1),
            w2: g.constant(&self.w2),
            b2: g.constant(&self.b2),
        };
        let x = g.constant_owned(features.clone().insert_axis(ndarray::Axis(0)));
        let y = vars.forward(&mut g, x, None);
        Ok(g.scalar(y))
    }
}

pub struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl HeadVars {
    /// `x` is 1×input; returns a 1×1 node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, dropout: Option<&mut Dropout<'_>>) -> Var {
        let h = g.matmul_nt(x, self.w1);
        let h = g.add_row(h, self.b1);
        let mut h = g.gelu(h);
        if let Some(dr) = dropout {
            h = dr.apply(g, h);
        }
        let y = g.matmul_nt(h, self.w2);
        g.add_row(y, self.b2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// `v = p + attention(p, contents)` when true, the bare readout otherwise.
    pub residual: bool,
    /// Learned query/key/value projections inside the fusion attention.
    pub projections: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            residual: true,
            projections: false,
        }
    }
}

/// Fusion attention, optionally with learned projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion<T: Scalar> {
    pub config: FusionConfig,
    /// `[W_q, W_k, W_v]`, each `d × d`, present iff `config.projections`.
    pub projections: Option<[Array2<T>; 3]>,
}

pub const FUSION_PROJ_NAMES: [&str; 3] = ["head.fusion.q", "head.fusion.k", "head.fusion.v"];

impl<T: Scalar> Fusion<T> {
    /// Projections start at the identity so the layer begins as the plain
    /// scaled dot-product form.
    pub fn init(config: FusionConfig, d: usize) -> Self {
        let projections = config
            .projections
            .then(|| [Array2::eye(d), Array2::eye(d), Array2::eye(d)]);
        Self { config, projections }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> FusionVars {
        FusionVars {
            residual: self.config.residual,
            projections: self.projections.as_ref().map(|[q, k, v]| {
                [
                    g.param(q, FUSION_PROJ_NAMES[0]),
                    g.param(k, FUSION_PROJ_NAMES[1]),
                    g.param(v, FUSION_PROJ_NAMES[2]),
                ]
            }),
        }
    }

    pub fn fuse(&self, query: &Array1<T>, contents: &[Array1<T>]) -> Result<Array1<T>> {
        check_fuse_inputs(query, contents)?;
        let mut g = Graph::new();
        let vars = FusionVars {
            residual: self.config.residual,
            projections: self
                .projections
                .as_ref()
                .map(|[q, k, v]| [g.constant(q), g.constant(k), g.constant(v)]),
        };
        let q = g.constant_owned(query.clone().insert_axis(ndarray::Axis(0)));
        let c = g.constant_owned(stack(contents));
        let out = vars.forward(&mut g, q, c);
        Ok(g.value(out).row(0).to_owned())
    }
}

pub struct FusionVars {
    residual: bool,
    projections: Option<[Var; 3]>,
}

impl FusionVars {
    /// `query` is 1×d, `contents` is k×d; returns 1×d.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, query: Var, contents: Var) -> Var {
        let d = g.value(query).ncols();
        let (q, k, v) = match self.projections {
            Some([wq, wk, wv]) => (
                g.matmul_nt(query, wq),
                g.matmul_nt(contents, wk),
                g.matmul_nt(contents, wv),
            ),
            None => (query, contents, contents),
        };
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, cast((d as f64).powf(-0.5)));
        let weights = g.softmax(scores);
        let read = g.matmul(weights, v);
        if self.residual {
            g.add(query, read)
        } else {
            read
        }
    }
}

fn check_fuse_inputs<T: Scalar>(query: &Array1<T>, contents: &[Array1<T>]) -> Result<()> {
    if contents.is_empty() {
        return Err(shape_err("fusion needs at least one content embedding"));
    }
    if let Some(c) = contents.iter().find(|c| c.len() != query.len()) {
        return Err(shape_err(format!(
            "content width {} does not match query width {}",
            c.len(),
            query.len()
        )));
    }
    Ok(())
}

fn stack<T: Scalar>(rows: &[Array1<T>]) -> Array2<T> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(ndarray::Axis(0))).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("rows share a width")
}

/// `query + Σ_j softmax_j(query·c_j / √d) c_j`.
pub fn fuse<T: Scalar>(query: &Array1<T>, contents: &[Array1<T>]) -> Result<Array1<T>> {
    Fusion::init(FusionConfig::default(), query.len()).fuse(query, contents)
}

pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(data_err(format!(
            "mse needs equal non-empty lists, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

fn sq_dist<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| to_f64((x - y) * (x - y))).sum()
}

/// Both directions of one interaction's ID/content triplet.
#[derive(Debug, Clone)]
pub struct Triplet<T: Scalar> {
    /// Fused item representation `v_i`, anchored against user IDs.
    pub item_anchor: Array1<T>,
    pub user_pos: Array1<T>,
    pub user_neg: Array1<T>,
    /// Fused user representation `v_u`, anchored against item IDs.
    pub user_anchor: Array1<T>,
    pub item_pos: Array1<T>,
    pub item_neg: Array1<T>,
}

/// `max(0, Δ + D(v_i,p_u⁺) − D(v_i,p_u⁻)) + max(0, Δ + D(v_u,p_i⁺) − D(v_u,p_i⁻))`
/// with squared Euclidean `D`.
pub fn triplet_loss<T: Scalar>(t: &Triplet<T>, margin: f64) -> f64 {
    let first = margin + sq_dist(&t.item_anchor, &t.user_pos) - sq_dist(&t.item_anchor, &t.user_neg);
    let second = margin + sq_dist(&t.user_anchor, &t.item_pos) - sq_dist(&t.user_anchor, &t.item_neg);
    first.max(0.0) + second.max(0.0)
}

/// Batch mean of [`triplet_loss`].
pub fn triplet_loss_batch<T: Scalar>(batch: &[Triplet<T>], margin: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(data_err("empty triplet batch"));
    }
    Ok(batch.iter().map(|t| triplet_loss(t, margin)).sum::<f64>() / batch.len() as f64)
}

/// Graph form of one triplet term pair; all inputs are 1×d nodes.
#[allow(clippy::too_many_arguments)]
pub fn triplet_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    item_anchor: Var,
    user_pos: Var,
    user_neg: Var,
    user_anchor: Var,
    item_pos: Var,
    item_neg: Var,
    margin: f64,
) -> Var {
    let hinge = |g: &mut Graph<'_, T>, a: Var, pos: Var, neg: Var| {
        let dp = g.sub(a, pos);
        let dp = g.sum_squares(dp);
        let dn = g.sub(a, neg);
        let dn = g.sum_squares(dn);
        let diff = g.sub(dp, dn);
        let arg = g.add_const(diff, cast(margin));
        g.relu(arg)
    };
    let first = hinge(g, item_anchor, user_pos, user_neg);
    let second = hinge(g, user_anchor, item_pos, item_neg);
    g.add(first, second)
}

/// `l_rec + λ·l_cl`.
pub fn total_loss(l_rec: f64, l_cl: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(config_err(format!("contrastive weight must be non-negative, got {lambda}")));
    }
    Ok(l_rec + lambda * l_cl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Array1<f64> {
        Array1::from(xs.to_vec())
    }

    #[test]
    fn fuse_single_content_adds_it() {
        let q = v(&[0.3, -1.0, 2.0]);
        let c = v(&[1.0, 1.0, 1.0]);
        let out = fuse(&q, &[c.clone()]).unwrap();
        assert_eq!(out, &q + &c);
    }

    #[test]
    fn fuse_identical_contents() {
        let q = v(&[0.5, 0.1, -0.2, 0.0]);
        let c = v(&[2.0, -1.0, 0.5, 3.0]);
        for k in 1..6 {
            let out = fuse(&q, &vec![c.clone(); k]).unwrap();
            for (o, w) in out.iter().zip((&q + &c).iter()) {
                assert!((o - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_matches_scalar_softmax_arithmetic() {
        let q = v(&[1.0, 0.0, -1.0, 0.5]);
        let c1 = v(&[0.5, 1.0, 0.0, -0.5]);
        let c2 = v(&[-1.0, 0.25, 2.0, 1.0]);
        // q·c1 = 0.5 - 0.25 = 0.25, q·c2 = -1 - 2 + 0.5 = -2.5; scale 1/2.
        let s1 = 0.25f64 / 2.0;
        let s2 = -2.5f64 / 2.0;
        let w1 = s1.exp() / (s1.exp() + s2.exp());
        let w2 = 1.0 - w1;
        let want: Vec<f64> = (0..4).map(|j| q[j] + w1 * c1[j] + w2 * c2[j]).collect();
        let got = fuse(&q, &[c1, c2]).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_without_contents_is_an_error() {
        assert!(fuse::<f64>(&v(&[1.0]), &[]).is_err());
        assert!(fuse(&v(&[1.0, 2.0]), &[v(&[1.0])]).is_err());
    }

    #[test]
    fn readout_without_residual_drops_query() {
        let fusion = Fusion::<f64>::init(
            FusionConfig {
                residual: false,
                projections: false,
            },
            2,
        );
        let out = fusion.fuse(&v(&[9.0, 9.0]), &[v(&[1.0, 2.0])]).unwrap();
        assert_eq!(out, v(&[1.0, 2.0]));
    }

    #[test]
    fn identity_projections_match_plain_fusion() {
        let with = Fusion::<f64>::init(
            FusionConfig {
                residual: true,
                projections: true,
            },
            3,
        );
        let q = v(&[0.1, 0.2, 0.3]);
        let cs = [v(&[1.0, 0.0, -1.0]), v(&[0.5, 0.5, 0.5])];
        let a = with.fuse(&q, &cs).unwrap();
        let b = fuse(&q, &cs).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_predicts_zero() {
        let head = PredictHead::<f64>::zeros(4, 4);
        assert_eq!(head.predict(&v(&[1.0, -3.0, 2.0, 7.0])).unwrap(), 0.0);
    }

    #[test]
    fn head_matches_hand_computation() {
        let head = PredictHead {
            w1: array![[1.0, -1.0], [0.5, 2.0]],
            b1: array![[0.1, -0.2]],
            w2: array![[2.0, -1.0]],
            b2: array![[0.3]],
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let x = [0.4, -0.6];
        let h1 = gelu(1.0 * 0.4 + -1.0 * -0.6 + 0.1);
        let h2 = gelu(0.5 * 0.4 + 2.0 * -0.6 - 0.2);
        let want = 2.0 * h1 - h2 + 0.3;
        let got = head.predict(&v(&x)).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(got, head.predict(&v(&x)).unwrap());
        assert!(head.predict(&v(&[1.0])).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 2.0);
        assert_eq!(mse_loss(&[3.0, 3.5], &[3.0, 3.5]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[5.0], &[1.0]).unwrap(), 16.0);
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn triplet(a: &[f64], p: &[f64], n: &[f64]) -> Triplet<f64> {
        Triplet {
            item_anchor: v(a),
            user_pos: v(p),
            user_neg: v(n),
            user_anchor: v(a),
            item_pos: v(p),
            item_neg: v(n),
        }
    }

    #[test]
    fn triplet_examples() {
        // Anchors on positives, negatives farther than the margin.
        assert_eq!(triplet_loss(&triplet(&[0.0, 0.0], &[0.0, 0.0], &[1.5, 0.0]), 1.0), 0.0);
        // Positive equals negative: each hinge yields the margin.
        assert!((triplet_loss(&triplet(&[0.3, 0.1], &[1.0, 2.0], &[1.0, 2.0]), 0.7) - 1.4).abs() < 1e-12);
        // max(0, 1 + 0.25 - 4) = 0 on both sides.
        assert_eq!(triplet_loss(&triplet(&[0.0, 0.0], &[0.0, 0.5], &[2.0, 0.0]), 1.0), 0.0);
        let active = triplet(&[0.0, 0.0], &[0.0, 1.0], &[0.0, 0.5]);
        assert!((triplet_loss(&active, 1.0) - 2.0 * (1.0 + 1.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn triplet_graph_matches_plain() {
        let t = triplet(&[0.2, -0.1], &[0.5, 0.4], &[0.0, 0.3]);
        let mut g = Graph::<f64>::new();
        let ins: Vec<Var> = [&t.item_anchor, &t.user_pos, &t.user_neg, &t.user_anchor, &t.item_pos, &t.item_neg]
            .iter()
            .map(|x| g.constant_owned((*x).clone().insert_axis(ndarray::Axis(0))))
            .collect();
        let l = triplet_var(&mut g, ins[0], ins[1], ins[2], ins[3], ins[4], ins[5], 1.0);
        assert!((g.scalar(l) - triplet_loss(&t, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.7, 5.0, 0.0).unwrap(), 1.7);
        assert!((total_loss(2.0, 3.0, 0.3).unwrap() - 2.9).abs() < 1e-12);
        assert_eq!(total_loss(2.0, 0.0, 0.4).unwrap(), 2.0);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn id_lookup_rejects_unknown_entities() {
        let ids = IdEmbeddings::<f32>::init(vec!["u1".into()], vec!["i1".into(), "i2".into()], 4, 0).unwrap();
        assert_eq!(ids.item_row("i2").unwrap(), 1);
        assert!(matches!(ids.user_row("u9"), Err(LoidError::UnknownEntity { .. })));
        assert!(IdEmbeddings::<f32>::init(vec!["u".into(), "u".into()], vec![], 4, 0).is_err());
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, d)
    }

    /// Product of two Householder reflections: an orthogonal map with det +1.
    fn rotation(u: &[f64], w: &[f64]) -> Array2<f64> {
        let d = u.len();
        let reflect = |x: &[f64]| {
            let n: f64 = x.iter().map(|a| a * a).sum::<f64>().max(1e-9);
            let mut h = Array2::eye(d);
            for i in 0..d {
                for j in 0..d {
                    h[[i, j]] -= 2.0 * x[i] * x[j] / n;
                }
            }
            h
        };
        reflect(u).dot(&reflect(w))
    }

    proptest! {
        #[test]
        fn triplet_is_nonnegative_and_zero_iff_hinges_inactive(
            a in vec_strategy(3), p in vec_strategy(3), n in vec_strategy(3),
            b in vec_strategy(3), q in vec_strategy(3), m in vec_strategy(3),
            margin in 0.01f64..3.0,
        ) {
            let t = Triplet { item_anchor: v(&a), user_pos: v(&p), user_neg: v(&n),
                              user_anchor: v(&b), item_pos: v(&q), item_neg: v(&m) };
            let loss = triplet_loss(&t, margin);
            prop_assert!(loss >= 0.0);
            let h1 = margin + sq_dist(&t.item_anchor, &t.user_pos) - sq_dist(&t.item_anchor, &t.user_neg);
            let h2 = margin + sq_dist(&t.user_anchor, &t.item_pos) - sq_dist(&t.user_anchor, &t.item_neg);
            prop_assert_eq!(loss == 0.0, h1 <= 0.0 && h2 <= 0.0);
        }

        #[test]
        fn mse_is_permutation_invariant(pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rng_from_seed(seed));
            let (p1, t1): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (p2, t2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            prop_assert!((mse_loss(&p1, &t1).unwrap() - mse_loss(&p2, &t2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn fuse_is_permutation_invariant(q in vec_strategy(4), cs in proptest::collection::vec(vec_strategy(4), 1..6), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let contents: Vec<_> = cs.iter().map(|c| v(c)).collect();
            let mut shuffled = contents.clone();
            shuffled.shuffle(&mut rng_from_seed(seed));
            let a = fuse(&v(&q), &contents).unwrap();
            let b = fuse(&v(&q), &shuffled).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn fuse_commutes_with_rotation(
            q in vec_strategy(4), cs in proptest::collection::vec(vec_strategy(4), 1..5),
            u in vec_strategy(4), w in vec_strategy(4),
        ) {
            let r = rotation(&u, &w);
            let contents: Vec<_> = cs.iter().map(|c| v(c)).collect();
            let rotated: Vec<_> = contents.iter().map(|c| r.dot(c)).collect();
            let a = r.dot(&fuse(&v(&q), &contents).unwrap());
            let b = fuse(&r.dot(&v(&q)), &rotated).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}
