use crate::adapters::LoraAdapter;
use crate::autodiff::{Dropout, Graph, Var};
use crate::error::{config_err, shape_err, LoidError, Result};
use crate::format::TensorFile;
use crate::tensor::{cast, derive_seed, gaussian, rng_from_seed, to_f64, Scalar, TensorHasher};
use crate::textenc::vocab::TokenSeq;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

const LN_EPS: f64 = 1e-5;

/// Shape of the encoder. The vocabulary size comes from the vocab itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 128,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(config_err("encoder dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(config_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(config_err("max_len must be at least 2"));
        }
        Ok(())
    }
}

/// Adaptable weight matrices of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatrixKind {
    #[serde(rename = "Q")]
    Q,
    #[serde(rename = "K")]
    K,
    #[serde(rename = "V")]
    V,
    #[serde(rename = "FFN_in")]
    FfnIn,
    #[serde(rename = "FFN_out")]
    FfnOut,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 5] = [
        MatrixKind::Q,
        MatrixKind::K,
        MatrixKind::V,
        MatrixKind::FfnIn,
        MatrixKind::FfnOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::Q => "Q",
            MatrixKind::K => "K",
            MatrixKind::V => "V",
            MatrixKind::FfnIn => "FFN_in",
            MatrixKind::FfnOut => "FFN_out",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixKind {
    type Err = LoidError;

    fn from_str(s: &str) -> Result<Self> {
        MatrixKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LoidError::Format(format!("unknown matrix name `{s}`")))
    }
}

/// One matrix in the encoder that can carry a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttachPoint {
    pub layer: usize,
    pub matrix: MatrixKind,
}

impl AttachPoint {
    pub fn new(layer: usize, matrix: MatrixKind) -> Self {
        Self { layer, matrix }
    }

    /// `layer{i}.{Q|K|V|FFN_in|FFN_out}`
    pub fn key(&self) -> String {
        format!("layer{}.{}", self.layer, self.matrix)
    }

    pub fn parse_key(key: &str) -> Result<Self> {
        let bad = || LoidError::Format(format!("bad attach point `{key}`"));
        let rest = key.strip_prefix("layer").ok_or_else(bad)?;
        let (layer, matrix) = rest.split_once('.').ok_or_else(bad)?;
        Ok(Self {
            layer: layer.parse().map_err(|_| bad())?,
            matrix: matrix.parse()?,
        })
    }
}

impl fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Linear maps are stored `d_out × d_in` and applied as `x · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub ln1_gamma: Array2<T>,
    pub ln1_beta: Array2<T>,
    pub wq: Array2<T>,
    pub bq: Array2<T>,
    pub wk: Array2<T>,
    pub bk: Array2<T>,
    pub wv: Array2<T>,
    pub bv: Array2<T>,
    pub ln2_gamma: Array2<T>,
    pub ln2_beta: Array2<T>,
    pub ffn_in: Array2<T>,
    pub ffn_in_bias: Array2<T>,
    pub ffn_out: Array2<T>,
    pub ffn_out_bias: Array2<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn matrix(&self, kind: MatrixKind) -> &Array2<T> {
        match kind {
            MatrixKind::Q => &self.wq,
            MatrixKind::K => &self.wk,
            MatrixKind::V => &self.wv,
            MatrixKind::FfnIn => &self.ffn_in,
            MatrixKind::FfnOut => &self.ffn_out,
        }
    }

    pub fn matrix_mut(&mut self, kind: MatrixKind) -> &mut Array2<T> {
        match kind {
            MatrixKind::Q => &mut self.wq,
            MatrixKind::K => &mut self.wk,
            MatrixKind::V => &mut self.wv,
            MatrixKind::FfnIn => &mut self.ffn_in,
            MatrixKind::FfnOut => &mut self.ffn_out,
        }
    }

    fn named(&self) -> [(&'static str, &Array2<T>); 14] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("Q", &self.wq),
            ("Q.bias", &self.bq),
            ("K", &self.wk),
            ("K.bias", &self.bk),
            ("V", &self.wv),
            ("V.bias", &self.bv),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("FFN_in", &self.ffn_in),
            ("FFN_in.bias", &self.ffn_in_bias),
            ("FFN_out", &self.ffn_out),
            ("FFN_out.bias", &self.ffn_out_bias),
        ]
    }
}

/// Frozen transformer weights. Nothing in the training code takes this
/// mutably; merging produces a new instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Scalar> {
    pub config: EncoderConfig,
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: Array2<T>,
    pub final_beta: Array2<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Seeded random initialization: embeddings ~ N(0, 1), linear weights
    /// ~ N(0, 1/fan_in), biases zero, layer norms identity.
    pub fn init(config: &EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 3 {
            return Err(config_err("vocabulary must contain the reserved tokens"));
        }
        let d = config.d_model;
        let f = config.d_ffn;
        let mut rng = rng_from_seed(derive_seed(seed, 0x454e_43));
        let tok_emb = gaussian(vocab_size, d, 1.0, &mut rng);
        let pos_emb = gaussian(config.max_len, d, 1.0, &mut rng);
        let ones = |n| Array2::ones((1, n));
        let zeros = |n| Array2::zeros((1, n));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: ones(d),
                ln1_beta: zeros(d),
                wq: gaussian(d, d, (d as f64).powf(-0.5), &mut rng),
                bq: zeros(d),
                wk: gaussian(d, d, (d as f64).powf(-0.5), &mut rng),
                bk: zeros(d),
                wv: gaussian(d, d, (d as f64).powf(-0.5), &mut rng),
                bv: zeros(d),
                ln2_gamma: ones(d),
                ln2_beta: zeros(d),
                ffn_in: gaussian(f, d, (d as f64).powf(-0.5), &mut rng),
                ffn_in_bias: zeros(f),
                ffn_out: gaussian(d, f, (f as f64).powf(-0.5), &mut rng),
                ffn_out_bias: zeros(d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_gamma: ones(d),
            final_beta: zeros(d),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn matrix(&self, point: AttachPoint) -> Option<&Array2<T>> {
        self.layers.get(point.layer).map(|l| l.matrix(point.matrix))
    }

    pub(crate) fn matrix_mut(&mut self, point: AttachPoint) -> Option<&mut Array2<T>> {
        self.layers.get_mut(point.layer).map(|l| l.matrix_mut(point.matrix))
    }

    /// Every attach point of the given kinds, in layer order.
    pub fn attach_points(&self, kinds: &[MatrixKind]) -> Vec<AttachPoint> {
        (0..self.layers.len())
            .flat_map(|layer| kinds.iter().map(move |&m| AttachPoint::new(layer, m)))
            .collect()
    }

    /// All tensors with their file names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = vec![
            ("enc.tok_emb".to_string(), &self.tok_emb),
            ("enc.pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .named()
                    .into_iter()
                    .map(|(n, m)| (format!("enc.layer{i}.{n}"), m)),
            );
        }
        out.push(("enc.final.gamma".to_string(), &self.final_gamma));
        out.push(("enc.final.beta".to_string(), &self.final_beta));
        out
    }

    /// SHA-256 over every tensor; used to audit that frozen weights never move.
    pub fn checksum(&self) -> String {
        let mut h = TensorHasher::new();
        for (name, m) in self.named_tensors() {
            h.update(&name, m);
        }
        h.finish()
    }

    pub fn convert<U: Scalar>(&self) -> EncoderParams<U> {
        use crate::tensor::convert as cv;
        EncoderParams {
            config: self.config.clone(),
            tok_emb: cv(&self.tok_emb),
            pos_emb: cv(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: cv(&l.ln1_gamma),
                    ln1_beta: cv(&l.ln1_beta),
                    wq: cv(&l.wq),
                    bq: cv(&l.bq),
                    wk: cv(&l.wk),
                    bk: cv(&l.bk),
                    wv: cv(&l.wv),
                    bv: cv(&l.bv),
                    ln2_gamma: cv(&l.ln2_gamma),
                    ln2_beta: cv(&l.ln2_beta),
                    ffn_in: cv(&l.ffn_in),
                    ffn_in_bias: cv(&l.ffn_in_bias),
                    ffn_out: cv(&l.ffn_out),
                    ffn_out_bias: cv(&l.ffn_out_bias),
                })
                .collect(),
            final_gamma: cv(&self.final_gamma),
            final_beta: cv(&self.final_beta),
        }
    }

    pub fn to_file(&self) -> TensorFile {
        let mut f = TensorFile::new(0);
        for (name, m) in self.named_tensors() {
            f.push(name, m);
        }
        let heads = Array2::from_elem((1, 1), cast::<T>(self.config.n_heads as f64));
        f.push("enc.n_heads", &heads);
        f
    }

    pub fn from_file(f: &TensorFile) -> Result<Self> {
        let tok_emb: Array2<T> = f.matrix("enc.tok_emb")?;
        let pos_emb: Array2<T> = f.matrix("enc.pos_emb")?;
        let n_heads = to_f64(f.matrix::<T>("enc.n_heads")?[[0, 0]]) as usize;
        let mut layers = Vec::new();
        while f.get(&format!("enc.layer{}.Q", layers.len())).is_some() {
            let i = layers.len();
            let m = |n: &str| f.matrix::<T>(&format!("enc.layer{i}.{n}"));
            layers.push(LayerParams {
                ln1_gamma: m("ln1.gamma")?,
                ln1_beta: m("ln1.beta")?,
                wq: m("Q")?,
                bq: m("Q.bias")?,
                wk: m("K")?,
                bk: m("K.bias")?,
                wv: m("V")?,
                bv: m("V.bias")?,
                ln2_gamma: m("ln2.gamma")?,
                ln2_beta: m("ln2.beta")?,
                ffn_in: m("FFN_in")?,
                ffn_in_bias: m("FFN_in.bias")?,
                ffn_out: m("FFN_out")?,
                ffn_out_bias: m("FFN_out.bias")?,
            });
        }
        let config = EncoderConfig {
            d_model: tok_emb.ncols(),
            n_layers: layers.len(),
            n_heads,
            d_ffn: layers.first().map_or(0, |l| l.ffn_in.nrows()),
            max_len: pos_emb.nrows(),
        };
        config
            .validate()
            .map_err(|e| LoidError::Format(format!("encoder file: {e}")))?;
        let params = Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_gamma: f.matrix("enc.final.gamma")?,
            final_beta: f.matrix("enc.final.beta")?,
        };
        params
            .check_shapes()
            .map_err(|e| LoidError::Format(format!("encoder file: {e}")))?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.config.d_model;
        let f = self.config.d_ffn;
        let expect = |name: String, m: &Array2<T>, shape: (usize, usize)| {
            if m.dim() == shape {
                Ok(())
            } else {
                Err(shape_err(format!("{name} is {:?}, expected {shape:?}", m.dim())))
            }
        };
        expect("pos_emb".into(), &self.pos_emb, (self.config.max_len, d))?;
        expect("final.gamma".into(), &self.final_gamma, (1, d))?;
        expect("final.beta".into(), &self.final_beta, (1, d))?;
        for (i, l) in self.layers.iter().enumerate() {
            for (n, m) in l.named() {
                let shape = match n {
                    "Q" | "K" | "V" => (d, d),
                    "FFN_in" => (f, d),
                    "FFN_out" => (d, f),
                    "FFN_in.bias" => (1, f),
                    _ => (1, d),
                };
                expect(format!("layer{i}.{n}"), m, shape)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::load(path)?;
        Self::from_file(&f).map_err(|e| LoidError::Format(format!("{}: {e}", path.display())))
    }
}

struct LinearVars {
    weight: Var,
    bias: Var,
}

struct LayerVars {
    ln1: (Var, Var),
    q: LinearVars,
    k: LinearVars,
    v: LinearVars,
    ln2: (Var, Var),
    ffn_in: LinearVars,
    ffn_out: LinearVars,
}

/// Encoder weights bound into one graph, with adapters already folded in as
/// `W + B·A`. Bind once per graph and reuse across sequences.
pub struct EncoderVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_ln: (Var, Var),
    n_heads: usize,
    vocab_size: usize,
    max_len: usize,
}

/// How adapter factors enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterRole {
    Frozen,
    /// Factors are graph parameters named `layer{i}.{M}.{A|B}`.
    Trainable,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn bind<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        adapter: Option<(&'a LoraAdapter<T>, AdapterRole)>,
    ) -> Result<EncoderVars> {
        if let Some((a, _)) = adapter {
            a.check_against(self)?;
        }
        let linear = |g: &mut Graph<'a, T>, layer: usize, kind: MatrixKind, bias: &'a Array2<T>| {
            let w = g.constant(self.layers[layer].matrix(kind));
            let point = AttachPoint::new(layer, kind);
            let weight = match adapter.and_then(|(a, role)| a.pair(point).map(|p| (p, role))) {
                Some((pair, role)) => {
                    let (b, a) = match role {
                        AdapterRole::Frozen => (g.constant(&pair.b), g.constant(&pair.a)),
                        AdapterRole::Trainable => (
                            g.param(&pair.b, &format!("{}.B", point.key())),
                            g.param(&pair.a, &format!("{}.A", point.key())),
                        ),
                    };
                    let delta = g.matmul(b, a);
                    g.add(w, delta)
                }
                None => w,
            };
            LinearVars {
                weight,
                bias: g.constant(bias),
            }
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let ln1 = (g.constant(&l.ln1_gamma), g.constant(&l.ln1_beta));
            let q = linear(g, i, MatrixKind::Q, &l.bq);
            let k = linear(g, i, MatrixKind::K, &l.bk);
            let v = linear(g, i, MatrixKind::V, &l.bv);
            let ln2 = (g.constant(&l.ln2_gamma), g.constant(&l.ln2_beta));
            let ffn_in = linear(g, i, MatrixKind::FfnIn, &l.ffn_in_bias);
            let ffn_out = linear(g, i, MatrixKind::FfnOut, &l.ffn_out_bias);
            layers.push(LayerVars {
                ln1,
                q,
                k,
                v,
                ln2,
                ffn_in,
                ffn_out,
            });
        }
        Ok(EncoderVars {
            tok_emb: g.constant(&self.tok_emb),
            pos_emb: g.constant(&self.pos_emb),
            layers,
            final_ln: (g.constant(&self.final_gamma), g.constant(&self.final_beta)),
            n_heads: self.config.n_heads,
            vocab_size: self.vocab_size(),
            max_len: self.config.max_len,
        })
    }
}

fn apply_linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, lin: &LinearVars) -> Var {
    let y = g.matmul_nt(x, lin.weight);
    g.add_row(y, lin.bias)
}

impl EncoderVars {
    /// Final-layer hidden state at the `[CLS]` position, as a 1×d node.
    ///
    /// Padding positions are never attended to, so only the valid prefix is
    /// computed; the result is independent of how much padding follows.
    pub fn forward_cls<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &TokenSeq,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let len = tokens.valid_len();
        if len == 0 {
            return Err(shape_err("token sequence has no valid positions"));
        }
        if len > self.max_len {
            return Err(shape_err(format!(
                "sequence of {len} tokens exceeds positional table of {}",
                self.max_len
            )));
        }
        let ids: Vec<usize> = tokens.ids[..len].iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(shape_err(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        let emb = g.gather_rows(self.tok_emb, &ids);
        let pos = g.slice_rows(self.pos_emb, 0, len);
        let mut x = g.add(emb, pos);
        let keep = vec![true; len];
        let n_layers = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            // The last block only needs the [CLS] query row.
            let last = li + 1 == n_layers;
            let h = g.layer_norm(x, layer.ln1.0, layer.ln1.1, cast(LN_EPS));
            let q_in = if last { g.slice_rows(h, 0, 1) } else { h };
            let q = apply_linear(g, q_in, &layer.q);
            let k = apply_linear(g, h, &layer.k);
            let v = apply_linear(g, h, &layer.v);
            let d = g.value(q).ncols();
            let dh = d / self.n_heads;
            let scale: T = cast((dh as f64).powf(-0.5));
            let mut heads = Vec::with_capacity(self.n_heads);
            for hd in 0..self.n_heads {
                let (qh, kh, vh) = if self.n_heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, hd * dh, dh),
                        g.slice_cols(k, hd * dh, dh),
                        g.slice_cols(v, hd * dh, dh),
                    )
                };
                let scores = g.matmul_nt(qh, kh);
                let scores = g.scale(scores, scale);
                let mut probs = g.masked_softmax(scores, &keep);
                if let Some(dr) = dropout.as_deref_mut() {
                    probs = dr.apply(g, probs);
                }
                heads.push(g.matmul(probs, vh));
            }
            let attn = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            };
            let residual = if last { g.slice_rows(x, 0, 1) } else { x };
            x = g.add(residual, attn);
            let h2 = g.layer_norm(x, layer.ln2.0, layer.ln2.1, cast(LN_EPS));
            let f = apply_linear(g, h2, &layer.ffn_in);
            let f = g.gelu(f);
            let f = apply_linear(g, f, &layer.ffn_out);
            x = g.add(x, f);
        }
        let cls = if n_layers == 0 { g.slice_rows(x, 0, 1) } else { x };
        Ok(g.layer_norm(cls, self.final_ln.0, self.final_ln.1, cast(LN_EPS)))
    }
}

/// Pooled `[CLS]` embedding of one review, dropout disabled. With an adapter,
/// every adapted matrix is used as `W + B·A`.
pub fn encode<T: Scalar>(
    tokens: &TokenSeq,
    params: &EncoderParams<T>,
    adapter: Option<&LoraAdapter<T>>,
) -> Result<Array1<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, adapter.map(|a| (a, AdapterRole::Frozen)))?;
    let cls = vars.forward_cls(&mut g, tokens, None)?;
    Ok(g.value(cls).row(0).to_owned())
}

/// Encodes many sequences against one binding of the weights.
pub fn encode_all<T: Scalar>(
    seqs: &[TokenSeq],
    params: &EncoderParams<T>,
    adapter: Option<&LoraAdapter<T>>,
) -> Result<Vec<Array1<T>>> {
    let folded;
    let params = match adapter {
        Some(a) => {
            folded = crate::adapters::fold_adapter(params, a)?;
            &folded
        }
        None => params,
    };
    seqs.iter().map(|s| encode(s, params, None)).collect()
}
