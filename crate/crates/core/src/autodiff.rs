//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Frozen tensors are
//! borrowed into the graph as constants and never receive gradients; trainable
//! tensors enter through [`Graph::param`] under a stable name, and
//! [`Graph::backward`] returns their gradients keyed by that name. A name may be
//! bound several times in one graph; its gradients are summed.

use crate::tensor::{cast, Rng, Scalar};
use rand::Rng as _;
use ndarray::{s, Array2, Axis};
use std::borrow::Cow;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    Gelu(usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    MaskedSoftmax {
        x: usize,
    },
    Dropout {
        x: usize,
        mask: Array2<T>,
    },
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SumSquares(usize),
    Sum(usize),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Array2<T>>,
    op: Op<T>,
    needs_grad: bool,
    name: Option<String>,
}

/// Gradients of named parameters.
#[derive(Debug, Clone, Default)]
pub struct Grads<T: Scalar> {
    inner: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.inner.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.inner.iter()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn add(&mut self, name: &str, g: &Array2<T>) {
        match self.inner.get_mut(name) {
            Some(acc) => *acc += g,
            None => {
                self.inner.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Sums another gradient set into this one.
    pub fn merge(&mut self, other: &Grads<T>) {
        for (name, g) in other.iter() {
            self.add(name, g);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.inner.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

/// Inverted dropout driven by a seeded generator. A rate of zero is a no-op.
pub struct Dropout<'r> {
    p: f64,
    rng: &'r mut Rng,
}

impl<'r> Dropout<'r> {
    pub fn new(p: f64, rng: &'r mut Rng) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        Self { p, rng }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Var {
        if self.p == 0.0 {
            return x;
        }
        let keep_scale: T = cast(1.0 / (1.0 - self.p));
        let (r, c) = g.value(x).dim();
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if self.rng.random::<f64>() < self.p {
                T::zero()
            } else {
                keep_scale
            }
        });
        g.dropout(x, mask)
    }
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half: T = cast(0.5);
    let inner = cast::<T>(GELU_C) * (x + cast::<T>(GELU_K) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half: T = cast(0.5);
    let c: T = cast(GELU_C);
    let k: T = cast(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + cast::<T>(3.0) * k * x * x)
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Array2<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: &'a Array2<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, value: Array2<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, x: T) -> Var {
        self.constant_owned(Array2::from_elem((1, 1), x))
    }

    /// Binds a trainable tensor under `name`.
    pub fn param(&mut self, value: &'a Array2<T>, name: &str) -> Var {
        let v = self.push(Cow::Borrowed(value), Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.owned(out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.owned(out, Op::MatMulNT(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.owned(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.owned(out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Adds the 1×n row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) + self.value(row);
        self.owned(out, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).mapv(|x| x * s);
        self.owned(out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.owned(out, Op::AddConst(a.0), &[a.0])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.owned(out, Op::Gelu(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(T::zero()));
        self.owned(out, Op::Relu(a.0), &[a.0])
    }

    /// Row-wise layer normalization with 1×n scale and offset rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let n: T = cast(xv.ncols() as f64);
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        out = out * self.value(gamma) + self.value(beta);
        self.owned(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Row-wise softmax restricted to columns with `keep[j] == true`; the other
    /// columns get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ncols(), keep.len(), "softmax mask width");
        assert!(keep.iter().any(|&k| k), "softmax needs one kept column");
        let mut out = Array2::zeros(xv.dim());
        for (src, mut dst) in xv.rows().into_iter().zip(out.rows_mut()) {
            let max = src
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ((d, &v), &k) in dst.iter_mut().zip(src.iter()).zip(keep) {
                if k {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            dst.mapv_inplace(|v| v / total);
        }
        self.owned(
            out,
            Op::MaskedSoftmax { x: x.0 },
            &[x.0],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let keep = vec![true; self.value(x).ncols()];
        self.masked_softmax(x, &keep)
    }

    /// Multiplies by a fixed mask; callers pass entries in {0, 1/(1-p)}.
    pub fn dropout(&mut self, x: Var, mask: Array2<T>) -> Var {
        let out = self.value(x) * &mask;
        self.owned(out, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let tv = self.value(table);
        let out = tv.select(Axis(0), rows);
        self.owned(
            out,
            Op::GatherRows {
                table: table.0,
                rows: rows.to_vec(),
            },
            &[table.0],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.owned(out, Op::SliceRows { x: x.0, start }, &[x.0])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.owned(out, Op::SliceCols { x: x.0, start }, &[x.0])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths agree");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.owned(out, Op::ConcatRows(idx.clone()), &idx)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights agree");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.owned(out, Op::ConcatCols(idx.clone()), &idx)
    }

    /// Sum of squared entries, as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x * x).sum::<T>();
        self.owned(Array2::from_elem((1, 1), v), Op::SumSquares(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.owned(Array2::from_elem((1, 1), v), Op::Sum(a.0), &[a.0])
    }

    /// Sums a list of 1×1 nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        let first = *iter.next().expect("add_all needs one term");
        iter.fold(first, |acc, &t| self.add(acc, t))
    }

    /// Gradients of the 1×1 node `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar node");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        let mut out = Grads::default();
        if !self.nodes[loss.0].needs_grad {
            return out;
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(name) = &node.name {
                out.add(name, &g);
            }
            let val = |j: usize| -> &Array2<T> { &self.nodes[j].value };
            let mut acc = |j: usize, delta: Array2<T>| {
                if !self.nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if self.nodes[*b].needs_grad {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.nodes[*a].needs_grad {
                        acc(*a, g.dot(val(*b)));
                    }
                    if self.nodes[*b].needs_grad {
                        acc(*b, g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.mapv(|x| -x));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g.mapv(|x| x * *s)),
                Op::AddConst(a) => acc(*a, g),
                Op::Gelu(a) => {
                    let mut d = val(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = val(*a).mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                    d *= &g;
                    acc(*a, d);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = val(*x);
                    let gam = val(*gamma);
                    let cols = xv.ncols();
                    let n: T = cast(cols as f64);
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgamma = Array2::zeros((1, cols));
                    let mut dbeta = Array2::zeros((1, cols));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                        let inv = (var + *eps).sqrt().recip();
                        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let gy = g.row(r);
                        let dxhat: Vec<T> = (0..cols).map(|c| gy[c] * gam[[0, c]]).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                            / n;
                        for c in 0..cols {
                            dx[[r, c]] = inv * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                            dgamma[[0, c]] += gy[c] * xhat[c];
                            dbeta[[0, c]] += gy[c];
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::MaskedSoftmax { x } => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..y.ncols() {
                            dx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Dropout { x, mask } => acc(*x, g * mask),
                Op::GatherRows { table, rows } => {
                    if self.nodes[*table].needs_grad {
                        let mut d = Array2::zeros(val(*table).dim());
                        for (k, &r) in rows.iter().enumerate() {
                            let mut dst = d.row_mut(r);
                            dst += &g.row(k);
                        }
                        acc(*table, d);
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut d = Array2::zeros(val(*x).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*x, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(val(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = val(p).nrows();
                        acc(p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = val(p).ncols();
                        acc(p, g.slice(s![.., offset..offset + cols]).to_owned());
                        offset += cols;
                    }
                }
                Op::SumSquares(a) => {
                    let two_g = cast::<T>(2.0) * g[[0, 0]];
                    acc(*a, val(*a).mapv(|x| x * two_g));
                }
                Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            }
        }
        out
    }
}
