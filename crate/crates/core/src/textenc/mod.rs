//! Word-level tokenization and a small pre-norm transformer encoder whose
//! projection matrices are adapter attach points.

mod encoder;
mod vocab;

pub use encoder::{
    encode, encode_all, AdapterRole, AttachPoint, EncoderConfig, EncoderParams, EncoderVars, LayerParams,
    MatrixKind,
};
pub use vocab::{build_vocab, tokenize, words, TokenSeq, Vocab, CLS, PAD, RESERVED, UNK};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, LoraAdapter};
    use crate::autodiff::Graph;
    use crate::tensor::{gaussian, rng_from_seed};
    use rand::Rng;

    fn cfg(d: usize, layers: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: d,
            n_layers: layers,
            n_heads: 2,
            d_ffn: 2 * d,
            max_len: 10,
        }
    }

    fn random_tokens(rng: &mut crate::tensor::Rng, vocab: usize, max_len: usize) -> TokenSeq {
        let len = rng.random_range(1..max_len);
        let mut ids = vec![CLS];
        ids.extend((1..len).map(|_| rng.random_range(1..vocab as u32)));
        let mut mask = vec![true; ids.len()];
        ids.resize(max_len, PAD);
        mask.resize(max_len, false);
        TokenSeq { ids, mask }
    }

    fn with_random_b(params: &EncoderParams<f64>, seed: u64) -> LoraAdapter<f64> {
        let mut ad = init_adapter(params, &params.attach_points(&MatrixKind::ALL), 2, seed, "t").unwrap();
        let mut rng = rng_from_seed(seed ^ 0xff);
        let points: Vec<_> = ad.points().collect();
        for pt in points {
            let pair = ad.pair_mut(pt).unwrap();
            pair.b = gaussian(pair.b.nrows(), 2, 0.5, &mut rng);
        }
        ad
    }

    #[test]
    fn encode_is_deterministic() {
        let p = EncoderParams::<f32>::init(&cfg(16, 2), 20, 1).unwrap();
        let t = random_tokens(&mut rng_from_seed(2), 20, 10);
        let a = encode(&t, &p, None).unwrap();
        let b = encode(&t, &p, None).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn zero_b_adapter_is_exact_identity() {
        let p = EncoderParams::<f32>::init(&cfg(16, 2), 20, 1).unwrap();
        let ad = init_adapter(&p, &p.attach_points(&MatrixKind::ALL), 4, 9, "id").unwrap();
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let t = random_tokens(&mut rng, 20, 10);
            assert_eq!(encode(&t, &p, Some(&ad)).unwrap(), encode(&t, &p, None).unwrap());
        }
    }

    #[test]
    fn extra_padding_does_not_change_output() {
        let mut c = cfg(16, 2);
        c.max_len = 32;
        let p = EncoderParams::<f64>::init(&c, 20, 4).unwrap();
        let mut rng = rng_from_seed(5);
        for _ in 0..10 {
            let short = random_tokens(&mut rng, 20, 10);
            let mut long = short.clone();
            long.ids.resize(32, PAD);
            long.mask.resize(32, false);
            let a = encode(&short, &p, None).unwrap();
            let b = encode(&long, &p, None).unwrap();
            let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-6);
        }
    }

    #[test]
    fn folded_adapter_matches_attached_adapter() {
        let p = EncoderParams::<f64>::init(&cfg(8, 2), 15, 6).unwrap();
        let ad = with_random_b(&p, 7);
        let seqs: Vec<_> = {
            let mut rng = rng_from_seed(8);
            (0..5).map(|_| random_tokens(&mut rng, 15, 10)).collect()
        };
        let folded = encode_all(&seqs, &p, Some(&ad)).unwrap();
        for (s, f) in seqs.iter().zip(folded) {
            let attached = encode(s, &p, Some(&ad)).unwrap();
            let diff = attached.iter().zip(f.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        let p = EncoderParams::<f32>::init(&cfg(8, 1), 5, 1).unwrap();
        let t = TokenSeq {
            ids: vec![CLS, 7],
            mask: vec![true, true],
        };
        assert!(encode(&t, &p, None).is_err());
    }

    #[test]
    fn encoder_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.loid");
        let p = EncoderParams::<f32>::init(&cfg(8, 2), 11, 2).unwrap();
        p.save(&path).unwrap();
        let back = EncoderParams::<f32>::load(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.checksum(), p.checksum());
    }

    /// ∂MSE/∂A for every adapter entry against central differences.
    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let c = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            max_len: 8,
        };
        let p = EncoderParams::<f64>::init(&c, 12, 11).unwrap();
        let mut ad = with_random_b(&p, 12);
        let mut rng = rng_from_seed(13);
        let seqs: Vec<_> = (0..3).map(|_| random_tokens(&mut rng, 12, 8)).collect();
        let readout: ndarray::Array2<f64> = gaussian(1, 8, 1.0, &mut rng);
        let targets = [1.0, -0.5, 2.0];

        let loss = |ad: &LoraAdapter<f64>, trainable: bool| -> (f64, crate::autodiff::Grads<f64>) {
            let mut g = Graph::new();
            let role = if trainable { AdapterRole::Trainable } else { AdapterRole::Frozen };
            let vars = p.bind(&mut g, Some((ad, role))).unwrap();
            let w = g.constant(&readout);
            let mut terms = Vec::new();
            for (s, &t) in seqs.iter().zip(&targets) {
                let cls = vars.forward_cls(&mut g, s, None).unwrap();
                let y = g.matmul_nt(cls, w);
                let e = g.add_const(y, -t);
                terms.push(g.sum_squares(e));
            }
            let total = g.add_all(&terms);
            let mse = g.scale(total, 1.0 / 3.0);
            let grads = if trainable { g.backward(mse) } else { Default::default() };
            (g.scalar(mse), grads)
        };

        let (_, grads) = loss(&ad, true);
        let h = 1e-4;
        for (name, analytic) in grads.iter() {
            let mut numeric = analytic.clone();
            for r in 0..analytic.nrows() {
                for col in 0..analytic.ncols() {
                    let orig = ad.tensor_mut(name).unwrap()[[r, col]];
                    ad.tensor_mut(name).unwrap()[[r, col]] = orig + h;
                    let up = loss(&ad, false).0;
                    ad.tensor_mut(name).unwrap()[[r, col]] = orig - h;
                    let down = loss(&ad, false).0;
                    ad.tensor_mut(name).unwrap()[[r, col]] = orig;
                    numeric[[r, col]] = (up - down) / (2.0 * h);
                }
            }
            let err = (analytic - &numeric).mapv(|x| x * x).sum().sqrt();
            let scale = analytic.mapv(|x| x * x).sum().sqrt().max(numeric.mapv(|x| x * x).sum().sqrt());
            assert!(err / scale < 1e-3, "{name}: relative error {}", err / scale);
        }
        assert!(grads.iter().any(|(n, _)| n.ends_with(".A")));
    }
}
