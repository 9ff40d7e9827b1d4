//! Scalar abstraction and small matrix utilities shared by every module.
//!
//! Models are generic over [`Scalar`] so that production runs use `f32`
//! (the on-disk precision) while gradient audits run the identical code at
//! `f64`.

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub type Rng = ChaCha8Rng;

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 is representable in every Scalar")
}

#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("Scalar converts to f64")
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a parent seed and a stream index.
///
/// SplitMix64 finalizer over the combined words; stable across platforms.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chains [`derive_seed`] over several stream indices.
pub fn derive_seed_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &p| derive_seed(s, p))
}

/// Matrix of i.i.d. Gaussian(0, std²) entries. Samples are drawn at `f64`
/// and cast, so `f32` and `f64` instantiations share the same draws.
pub fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || cast(normal.sample(rng)))
}

/// Converts every entry of a matrix to another scalar type.
pub fn convert<A: Scalar, B: Scalar>(m: &Array2<A>) -> Array2<B> {
    m.mapv(|x| cast::<B>(to_f64(x)))
}

/// Incremental SHA-256 over tensors; entries are hashed as little-endian
/// `f64` so the digest does not depend on memory layout.
#[derive(Default)]
pub struct TensorHasher {
    inner: Sha256,
}

impl TensorHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update<T: Scalar>(&mut self, name: &str, m: &Array2<T>) {
        self.inner.update((name.len() as u64).to_le_bytes());
        self.inner.update(name.as_bytes());
        self.inner.update((m.nrows() as u64).to_le_bytes());
        self.inner.update((m.ncols() as u64).to_le_bytes());
        for &x in m.iter() {
            self.inner.update(to_f64(x).to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex(&self.inner.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn max_abs_diff<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| to_f64((x - y).abs()))
        .fold(0.0, f64::max)
}
