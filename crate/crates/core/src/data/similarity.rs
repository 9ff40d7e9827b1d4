use super::Interaction;
use crate::adapters::{fold_adapter, LoraAdapter};
use crate::error::{data_err, Result};
use crate::tensor::{derive_seed, rng_from_seed, to_f64, Scalar};
use crate::textenc::{encode, tokenize, EncoderParams, Vocab};
use rand::seq::index;
use std::borrow::Cow;

pub const DEFAULT_SIM_SAMPLES: usize = 100;

/// Anything that maps a review to a fixed-width vector.
pub trait TextEncoder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// `[CLS]` embeddings from an [`EncoderParams`], optionally with an adapter
/// folded in.
pub struct ClsEncoder<'a, T: Scalar> {
    params: Cow<'a, EncoderParams<T>>,
    vocab: &'a Vocab,
}

impl<'a, T: Scalar> ClsEncoder<'a, T> {
    pub fn new(params: &'a EncoderParams<T>, vocab: &'a Vocab, adapter: Option<&LoraAdapter<T>>) -> Result<Self> {
        let params = match adapter {
            Some(a) => Cow::Owned(fold_adapter(params, a)?),
            None => Cow::Borrowed(params),
        };
        Ok(Self { params, vocab })
    }
}

impl<T: Scalar> TextEncoder for ClsEncoder<'_, T> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let seq = tokenize(text, self.vocab, self.params.config.max_len);
        Ok(encode(&seq, &self.params, None)?.iter().map(|&x| to_f64(x)).collect())
    }
}

fn centroid(domain: &[Interaction], n: usize, encoder: &dyn TextEncoder, seed: u64) -> Result<Vec<f64>> {
    if domain.len() < n {
        return Err(data_err(format!(
            "domain has {} reviews, similarity needs {n}",
            domain.len()
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0x53494d));
    let mut sum: Vec<f64> = Vec::new();
    for i in index::sample(&mut rng, domain.len(), n) {
        let v = encoder.embed(&domain[i].text)?;
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
        }
        for (s, x) in sum.iter_mut().zip(&v) {
            *s += x;
        }
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Cosine between the mean embeddings of `n` reviews sampled from each
/// domain. Both domains are sampled with the same seed, so the result is
/// symmetric.
pub fn domain_similarity(
    a: &[Interaction],
    b: &[Interaction],
    n: usize,
    encoder: &dyn TextEncoder,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(data_err("similarity needs at least one sampled review"));
    }
    let ca = centroid(a, n, encoder, seed)?;
    let cb = centroid(b, n, encoder, seed)?;
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let na = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(data_err("domain centroid has zero norm"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthSpec};
    use crate::textenc::{build_vocab, EncoderConfig};

    fn setup(spec: &SynthSpec) -> (Vec<Interaction>, Vec<Interaction>, Vocab, EncoderParams<f32>) {
        let c = gen_synthetic(spec).unwrap();
        let [a, b] = c.domains;
        let texts: Vec<&str> = a.interactions.iter().chain(&b.interactions).map(|x| x.text.as_str()).collect();
        let vocab = build_vocab(&texts, 1).unwrap();
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            max_len: 16,
        };
        let params = EncoderParams::init(&cfg, vocab.len(), 5).unwrap();
        (a.interactions, b.interactions, vocab, params)
    }

    #[test]
    fn self_similarity_is_one_and_symmetric() {
        let spec = SynthSpec {
            n_interactions: 120,
            ..Default::default()
        };
        let (a, b, vocab, params) = setup(&spec);
        let enc = ClsEncoder::new(&params, &vocab, None).unwrap();
        assert!((domain_similarity(&a, &a, 100, &enc, 3).unwrap() - 1.0).abs() < 1e-6);
        let ab = domain_similarity(&a, &b, 100, &enc, 3).unwrap();
        let ba = domain_similarity(&b, &a, 100, &enc, 3).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab < 1.0);
    }

    #[test]
    fn too_few_reviews_is_an_error() {
        let spec = SynthSpec {
            n_interactions: 50,
            ..Default::default()
        };
        let (a, b, vocab, params) = setup(&spec);
        let enc = ClsEncoder::new(&params, &vocab, None).unwrap();
        assert!(domain_similarity(&a, &b, DEFAULT_SIM_SAMPLES, &enc, 0).is_err());
    }

    struct Zero;
    impl TextEncoder for Zero {
        fn embed(&self, _: &str) -> Result<Vec<f64>> {
            Ok(vec![0.0; 4])
        }
    }

    #[test]
    fn zero_centroid_is_an_error() {
        let xs = vec![Interaction::new("u", "i", 3.0, "x").unwrap(); 3];
        assert!(domain_similarity(&xs, &xs, 2, &Zero, 0).is_err());
    }
}
