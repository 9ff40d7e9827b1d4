use super::{delta_of, DenseDelta, LoraAdapter};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{cast, derive_seed, rng_from_seed, Scalar};
use crate::textenc::EncoderParams;
use ndarray::Array2;
use rand::Rng;

/// Drop-and-rescale merge of `n ≥ 0` adapters.
#[derive(Debug, Clone)]
pub struct MergeSpec<'a, T: Scalar> {
    pub p: f64,
    pub seed: u64,
    pub adapters: Vec<&'a LoraAdapter<T>>,
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err(format!("drop probability must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// Zeroes each entry independently with probability `p` and scales the
/// survivors by `1/(1-p)`. `p = 0` returns the input unchanged.
pub fn dare_drop_rescale_matrix<T: Scalar>(delta: &Array2<T>, p: f64, seed: u64) -> Result<Array2<T>> {
    check_p(p)?;
    if p == 0.0 {
        return Ok(delta.clone());
    }
    let scale: T = cast(1.0 / (1.0 - p));
    let mut rng = rng_from_seed(seed);
    Ok(delta.mapv(|x| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            x * scale
        }
    }))
}

/// Elementwise drop-and-rescale over every matrix of a dense delta; each
/// attach point draws from its own derived stream.
pub fn dare_drop_rescale<T: Scalar>(delta: &DenseDelta<T>, p: f64, seed: u64) -> Result<DenseDelta<T>> {
    check_p(p)?;
    delta
        .iter()
        .enumerate()
        .map(|(i, (point, m))| Ok((*point, dare_drop_rescale_matrix(m, p, derive_seed(seed, i as u64))?)))
        .collect()
}

/// `base + Σᵢ drop_rescale(B_i·A_i)`, returned as a new parameter set.
/// Adapter `i` uses the sub-seed `derive_seed(spec.seed, i)`.
pub fn dare_merge<T: Scalar>(base: &EncoderParams<T>, spec: &MergeSpec<'_, T>) -> Result<EncoderParams<T>> {
    check_p(spec.p)?;
    for adapter in &spec.adapters {
        adapter.check_against(base)?;
    }
    let mut merged = base.clone();
    for (i, adapter) in spec.adapters.iter().enumerate() {
        let dropped = dare_drop_rescale(&delta_of(adapter), spec.p, derive_seed(spec.seed, i as u64))?;
        for (point, d) in dropped {
            let w = merged
                .matrix_mut(point)
                .ok_or_else(|| shape_err(format!("attach point {point} missing from base")))?;
            *w += &d;
        }
    }
    Ok(merged)
}
