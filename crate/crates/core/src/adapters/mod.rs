//! Low-rank adapters ("plugins"), their dense deltas, and drop-and-rescale
//! merging of several adapters into one frozen encoder.

mod dare;
mod io;

pub use dare::{dare_drop_rescale, dare_drop_rescale_matrix, dare_merge, MergeSpec};
pub use io::{load_adapter, save_adapter};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{derive_seed, gaussian, rng_from_seed, Scalar, TensorHasher};
use crate::textenc::{AttachPoint, EncoderParams};
use ndarray::Array2;
use std::collections::BTreeMap;

/// Standard deviation of the Gaussian used for fresh `A` factors.
pub const INIT_STD: f64 = 0.02;

/// `B` is `d_out × r`, `A` is `r × d_in`; the adapted matrix is `W + B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T: Scalar> {
    pub b: Array2<T>,
    pub a: Array2<T>,
}

impl<T: Scalar> LoraPair<T> {
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar> {
    rank: usize,
    pub label: String,
    pairs: BTreeMap<AttachPoint, LoraPair<T>>,
}

/// Dense `B·A` per attach point.
pub type DenseDelta<T> = BTreeMap<AttachPoint, Array2<T>>;

impl<T: Scalar> LoraAdapter<T> {
    /// Assembles an adapter from explicit factors, checking every pair has
    /// rank `rank` and that the rank is below both matrix dimensions.
    pub fn from_pairs(
        rank: usize,
        label: impl Into<String>,
        pairs: BTreeMap<AttachPoint, LoraPair<T>>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(config_err("adapter rank must be at least 1"));
        }
        for (point, pair) in &pairs {
            let (d_out, rb) = pair.b.dim();
            let (ra, d_in) = pair.a.dim();
            if rb != rank || ra != rank {
                return Err(shape_err(format!(
                    "{point}: factors B {:?} / A {:?} do not have rank {rank}",
                    pair.b.dim(),
                    pair.a.dim()
                )));
            }
            if rank >= d_out.min(d_in) {
                return Err(config_err(format!(
                    "{point}: rank {rank} is not below min({d_out}, {d_in})"
                )));
            }
        }
        Ok(Self {
            rank,
            label: label.into(),
            pairs,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn pair(&self, point: AttachPoint) -> Option<&LoraPair<T>> {
        self.pairs.get(&point)
    }

    pub fn pair_mut(&mut self, point: AttachPoint) -> Option<&mut LoraPair<T>> {
        self.pairs.get_mut(&point)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&AttachPoint, &LoraPair<T>)> {
        self.pairs.iter()
    }

    pub fn points(&self) -> impl Iterator<Item = AttachPoint> + '_ {
        self.pairs.keys().copied()
    }

    /// Factor addressed by its graph/file name `layer{i}.{M}.{A|B}`.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        let (key, which) = name.rsplit_once('.')?;
        let point = AttachPoint::parse_key(key).ok()?;
        let pair = self.pairs.get_mut(&point)?;
        match which {
            "A" => Some(&mut pair.a),
            "B" => Some(&mut pair.b),
            _ => None,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Array2<T>)> {
        self.pairs
            .iter()
            .flat_map(|(p, pair)| {
                [
                    (format!("{}.A", p.key()), &pair.a),
                    (format!("{}.B", p.key()), &pair.b),
                ]
            })
            .collect()
    }

    pub fn checksum(&self) -> String {
        let mut h = TensorHasher::new();
        for (name, m) in self.named_tensors() {
            h.update(&name, m);
        }
        h.finish()
    }

    /// Verifies every attach point exists in `params` with matching shapes.
    pub fn check_against(&self, params: &EncoderParams<T>) -> Result<()> {
        for (point, pair) in &self.pairs {
            let w = params
                .matrix(*point)
                .ok_or_else(|| shape_err(format!("attach point {point} does not exist in the encoder")))?;
            let (d_out, d_in) = w.dim();
            if pair.b.nrows() != d_out || pair.a.ncols() != d_in {
                return Err(shape_err(format!(
                    "{point}: adapter B·A is {}×{} but the weight is {d_out}×{d_in}",
                    pair.b.nrows(),
                    pair.a.ncols()
                )));
            }
        }
        Ok(())
    }
}

/// Fresh adapter: `A` ~ N(0, 0.02²) from the seed, `B` = 0, so the adapter is
/// an exact identity until trained.
pub fn init_adapter<T: Scalar>(
    params: &EncoderParams<T>,
    points: &[AttachPoint],
    rank: usize,
    seed: u64,
    label: impl Into<String>,
) -> Result<LoraAdapter<T>> {
    if rank == 0 {
        return Err(config_err("adapter rank must be at least 1"));
    }
    let mut pairs = BTreeMap::new();
    for (i, &point) in points.iter().enumerate() {
        let w = params
            .matrix(point)
            .ok_or_else(|| shape_err(format!("attach point {point} does not exist in the encoder")))?;
        let (d_out, d_in) = w.dim();
        if rank >= d_out.min(d_in) {
            return Err(config_err(format!(
                "rank {rank} is not below min({d_out}, {d_in}) at {point}"
            )));
        }
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        pairs.insert(
            point,
            LoraPair {
                b: Array2::zeros((d_out, rank)),
                a: gaussian(rank, d_in, INIT_STD, &mut rng),
            },
        );
    }
    LoraAdapter::from_pairs(rank, label, pairs)
}

/// `W + B·A`; `w` is left untouched.
pub fn apply_adapter<T: Scalar>(w: &Array2<T>, b: &Array2<T>, a: &Array2<T>) -> Result<Array2<T>> {
    if b.ncols() != a.nrows() || b.nrows() != w.nrows() || a.ncols() != w.ncols() {
        return Err(shape_err(format!(
            "cannot add B {:?} · A {:?} to W {:?}",
            b.dim(),
            a.dim(),
            w.dim()
        )));
    }
    Ok(w + &b.dot(a))
}

pub fn delta_of<T: Scalar>(adapter: &LoraAdapter<T>) -> DenseDelta<T> {
    adapter.pairs().map(|(p, pair)| (*p, pair.delta())).collect()
}

/// Copy of `params` with the adapter folded into the weights.
pub fn fold_adapter<T: Scalar>(
    params: &EncoderParams<T>,
    adapter: &LoraAdapter<T>,
) -> Result<EncoderParams<T>> {
    adapter.check_against(params)?;
    let mut out = params.clone();
    for (point, pair) in adapter.pairs() {
        let w = out.matrix_mut(*point).expect("checked above");
        *w = apply_adapter(w, &pair.b, &pair.a)?;
    }
    Ok(out)
}
