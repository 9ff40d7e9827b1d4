//! Binary tensor framing shared by adapter, encoder and checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LOID" | u16 version (=1) | u16 rank | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims[ndim] | f32 data (row-major)
//! ```

use crate::error::{LoidError, Result};
use crate::tensor::{cast, to_f64, Scalar};
use ndarray::Array2;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LOID";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn from_matrix<T: Scalar>(name: impl Into<String>, m: &Array2<T>) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.nrows() as u32, m.ncols() as u32],
            data: m.iter().map(|&x| to_f64(x) as f32).collect(),
        }
    }

    /// A tensor with no payload, used to carry a string in its name.
    pub fn marker(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            dims: vec![0],
            data: Vec::new(),
        }
    }

    pub fn to_matrix<T: Scalar>(&self) -> Result<Array2<T>> {
        let (rows, cols) = match self.dims.as_slice() {
            [r, c] => (*r as usize, *c as usize),
            [n] => (1, *n as usize),
            other => {
                return Err(LoidError::Format(format!(
                    "tensor `{}` has {} dimensions, expected 1 or 2",
                    self.name,
                    other.len()
                )))
            }
        };
        let data = self.data.iter().map(|&x| cast::<T>(x as f64)).collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| LoidError::Format(format!("tensor `{}`: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub rank: u16,
    pub tensors: Vec<RawTensor>,
}

impl TensorFile {
    pub fn new(rank: u16) -> Self {
        Self {
            rank,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, m: &Array2<T>) {
        self.tensors.push(RawTensor::from_matrix(name, m));
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Looks up a 2-D tensor, failing with a message naming it when absent.
    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Array2<T>> {
        self.get(name)
            .ok_or_else(|| LoidError::Format(format!("missing tensor `{name}`")))?
            .to_matrix()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| LoidError::Format(format!("tensor name too long: {}", t.name)))?;
            let expected: usize = t.dims.iter().map(|&d| d as usize).product();
            if expected != t.data.len() || t.dims.len() > u8::MAX as usize {
                return Err(LoidError::Format(format!(
                    "tensor `{}` dims {:?} do not match {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(LoidError::Format(format!(
                "bad magic {:?}, expected \"LOID\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(LoidError::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let rank = r.u16("rank")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let what = match tensors.last() {
                Some(RawTensor { name, .. }) => format!("tensor #{i} of {count} (after `{name}`) header"),
                None => format!("tensor #{i} of {count} header"),
            };
            let name_len = r.u16(&what)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| LoidError::Format(format!("tensor #{i} name is not UTF-8")))?
                .to_string();
            let ctx = format!("tensor `{name}`");
            let ndim = r.take(1, &ctx)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32(&ctx)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| LoidError::Format(format!("{ctx}: dims overflow")))?;
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &format!("{ctx} data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(RawTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(LoidError::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { rank, tensors })
    }

    /// Writes via a temporary sibling file and rename, so readers never see
    /// a partially written artifact.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
            .map_err(|e| LoidError::Format(format!("{}: {}", path.display(), strip(e))))
    }
}

fn strip(e: LoidError) -> String {
    match e {
        LoidError::Format(m) => m,
        other => other.to_string(),
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| LoidError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(LoidError::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len().saturating_sub(self.pos)
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new(2);
        f.push("layer0.Q.A", &Array2::from_shape_vec((2, 3), vec![1.0f32, -2.5, 3.0, 0.0, 1e-8, 7.0]).unwrap());
        f.tensors.push(RawTensor::marker("meta.label=books"));
        f
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LOID");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 2);
        assert_eq!(u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]), 2);
        let name_len = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"layer0.Q.A");
        let p = 14 + name_len;
        assert_eq!(bytes[p], 2);
        assert_eq!(u32::from_le_bytes(bytes[p + 1..p + 5].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[p + 5..p + 9].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[p + 9..p + 13].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[p + 13..p + 17].try_into().unwrap()), -2.5);
    }

    #[test]
    fn round_trip() {
        let f = sample();
        assert_eq!(TensorFile::from_bytes(&f.to_bytes().unwrap()).unwrap(), f);
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let err = TensorFile::from_bytes(&bytes[..30]).unwrap_err().to_string();
        assert!(err.contains("layer0.Q.A"), "{err}");
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(TensorFile::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(TensorFile::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn missing_tensor_lookup_is_named() {
        let err = sample().matrix::<f32>("head.w1").unwrap_err().to_string();
        assert!(err.contains("head.w1"));
    }
}
