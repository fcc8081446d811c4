//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DFTN" | version u32 | count u32 |
//!   per tensor: name_len u32 | name utf-8 | rank u32 | extents u32 * rank |
//!               dtype u8 (0 = f32, 1 = f64) | raw little-endian values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"DFTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    /// Convert to the requested precision.
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

/// Named tensors, kept sorted by name so serialization is canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_tensor(t));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.tensors.insert(name.into(), StoredTensor::F64(Tensor::scalar(v)));
    }

    pub fn get<T: Element>(&self, name: &str) -> Option<Tensor<T>> {
        self.tensors.get(name).map(|t| t.to())
    }

    pub fn require<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.require::<f64>(name)?.item())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    /// Store every tensor of `set` under `prefix/`.
    pub fn insert_set<T: Element>(&mut self, prefix: &str, set: &ParamSet<T>) {
        for (name, t) in set.iter() {
            self.insert(format!("{prefix}/{name}"), t);
        }
    }

    /// Overwrite every tensor of `set` from `prefix/` entries.
    pub fn load_set<T: Element>(&self, prefix: &str, set: &mut ParamSet<T>) -> Result<()> {
        set.load_from(|name| self.get(&format!("{prefix}/{name}")))
    }

    /// Merge all tensors of `other`, overwriting on name collisions.
    pub fn merge(&mut self, other: &Checkpoint) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Nest every tensor of `other` under `prefix/`.
    pub fn insert_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// Tensors under `prefix/`, with the prefix removed.
    pub fn extract_prefixed(&self, prefix: &str) -> Checkpoint {
        let head = format!("{prefix}/");
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(t.dtype().tag());
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected DFTN".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = DType::from_tag(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag")))?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let stored = match dtype {
                DType::F32 => StoredTensor::F32(decode(shape, raw)?),
                DType::F64 => StoredTensor::F64(decode(shape, raw)?),
            };
            if tensors.insert(name.clone(), stored).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode<T: Element>(shape: Vec<usize>, raw: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("a/w", &Tensor::<f32>::from_f64(vec![2, 3], &[1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        c.insert("b", &Tensor::<f64>::from_f64(vec![1], &[std::f64::consts::PI]).unwrap());
        c.insert_scalar("ema/tau", 0.99);
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"DFTN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // first entry, sorted: "a/w"
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a/w");
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 2);
        assert_eq!(bytes[31], 0);
    }

    #[test]
    fn scalar_has_rank_zero() {
        let c = sample();
        assert_eq!(c.tensors["ema/tau"].shape(), &[] as &[usize]);
        assert_eq!(c.scalar("ema/tau").unwrap(), 0.99);
    }

    #[test]
    fn truncated_and_garbage_inputs_are_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 7, 11, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
