use super::{LoraAdapter, LoraPair};
use crate::error::{LoidError, Result};
use crate::format::{RawTensor, TensorFile};
use crate::tensor::Scalar;
use crate::textenc::AttachPoint;
use std::collections::BTreeMap;
use std::path::Path;

const LABEL_PREFIX: &str = "meta.label=";

impl<T: Scalar> LoraAdapter<T> {
    /// Factor tensors named `layer{i}.{M}.{A|B}`, followed by a payload-free
    /// marker tensor carrying the label.
    pub fn to_file(&self) -> Result<TensorFile> {
        let rank = u16::try_from(self.rank)
            .map_err(|_| LoidError::Format(format!("rank {} does not fit in u16", self.rank)))?;
        let mut f = TensorFile::new(rank);
        for (name, m) in self.named_tensors() {
            f.push(name, m);
        }
        f.tensors.push(RawTensor::marker(format!("{LABEL_PREFIX}{}", self.label)));
        Ok(f)
    }

    /// Reads the adapter tensors out of a file; tensors with other prefixes
    /// (checkpoint heads, ID tables) are ignored.
    pub fn from_file(f: &TensorFile) -> Result<Self> {
        let mut factors: BTreeMap<AttachPoint, (Option<RawTensor>, Option<RawTensor>)> = BTreeMap::new();
        let mut label = String::new();
        for t in &f.tensors {
            if let Some(l) = t.name.strip_prefix(LABEL_PREFIX) {
                label = l.to_string();
                continue;
            }
            if !t.name.starts_with("layer") {
                continue;
            }
            let (key, which) = t
                .name
                .rsplit_once('.')
                .ok_or_else(|| LoidError::Format(format!("bad adapter tensor name `{}`", t.name)))?;
            let point = AttachPoint::parse_key(key)?;
            let slot = factors.entry(point).or_default();
            match which {
                "A" => slot.0 = Some(t.clone()),
                "B" => slot.1 = Some(t.clone()),
                _ => return Err(LoidError::Format(format!("bad adapter tensor name `{}`", t.name))),
            }
        }
        let mut pairs = BTreeMap::new();
        for (point, (a, b)) in factors {
            let missing = |w: &str| LoidError::Format(format!("missing tensor `{}.{w}`", point.key()));
            let a = a.ok_or_else(|| missing("A"))?.to_matrix()?;
            let b = b.ok_or_else(|| missing("B"))?.to_matrix()?;
            pairs.insert(point, LoraPair { b, a });
        }
        LoraAdapter::from_pairs(f.rank as usize, label, pairs)
            .map_err(|e| LoidError::Format(format!("inconsistent adapter: {e}")))
    }
}

pub fn save_adapter<T: Scalar>(adapter: &LoraAdapter<T>, path: &Path) -> Result<()> {
    adapter.to_file()?.save(path)
}

pub fn load_adapter<T: Scalar>(path: &Path) -> Result<LoraAdapter<T>> {
    let f = TensorFile::load(path)?;
    LoraAdapter::from_file(&f).map_err(|e| LoidError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapter;
    use crate::tensor::{gaussian, rng_from_seed};
    use crate::textenc::{EncoderConfig, EncoderParams, MatrixKind};

    fn adapter() -> LoraAdapter<f32> {
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_len: 8,
        };
        let p = EncoderParams::<f32>::init(&cfg, 12, 3).unwrap();
        let mut ad = init_adapter(&p, &p.attach_points(&MatrixKind::ALL), 3, 4, "books").unwrap();
        let mut rng = rng_from_seed(1);
        let points: Vec<_> = ad.points().collect();
        for pt in points {
            let pair = ad.pair_mut(pt).unwrap();
            pair.b = gaussian(pair.b.nrows(), 3, 1.0, &mut rng);
        }
        ad
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.loid");
        let ad = adapter();
        save_adapter(&ad, &path).unwrap();
        let back: LoraAdapter<f32> = load_adapter(&path).unwrap();
        assert_eq!(back.rank(), 3);
        assert_eq!(back.label, "books");
        for ((n1, m1), (n2, m2)) in ad.named_tensors().into_iter().zip(back.named_tensors()) {
            assert_eq!(n1, n2);
            assert!(m1.iter().zip(m2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_file_names_the_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.loid");
        save_adapter(&adapter(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_adapter::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("layer"), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.loid");
        save_adapter(&adapter(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"NOPE");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_adapter::<f32>(&path), Err(LoidError::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn file_missing_one_factor_is_rejected() {
        let mut f = adapter().to_file().unwrap();
        f.tensors.retain(|t| t.name != "layer1.V.B");
        let err = LoraAdapter::<f32>::from_file(&f).unwrap_err().to_string();
        assert!(err.contains("layer1.V.B"), "{err}");
    }
}
