//! Binary tensor files and multi-tensor archives.
//!
//! Single tensor (`.tnsr`), all integers little-endian:
//!
//! ```text
//! "TNSR" | version u8 = 1 | dtype u8 | rank u8 | reserved u8 = 0
//! rank × u64 dims | row-major payload
//! ```
//!
//! dtype 0 is `f32`; dtype 1 (`f64`) is used for traces that must round-trip
//! losslessly.
//!
//! Archive (`.tnsa`): `"TNSA" | version u8 = 1 | 3 reserved bytes | u32 count`,
//! then `count` index entries `u16 name_len | name | u64 offset | u64 len`
//! (offsets from the start of the file), then the concatenated `.tnsr` blobs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"TNSA";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<u64>,
    data: TensorData,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::TensorFormat(msg.into())
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let n: u64 = dims.iter().product();
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        } as u64;
        if n != len {
            return Err(bad(format!("dims {dims:?} need {n} values, got {len}")));
        }
        if dims.len() > u8::MAX as usize {
            return Err(bad("rank above 255"));
        }
        Ok(Self { dims, data })
    }

    /// Stores `values` as `f32`; panics if the element count does not match.
    pub fn f32(dims: Vec<u64>, values: &[f64]) -> Self {
        Self::new(dims, TensorData::F32(values.iter().map(|&v| v as f32).collect()))
            .expect("dims match payload")
    }

    pub fn f64(dims: Vec<u64>, values: Vec<f64>) -> Self {
        Self::new(dims, TensorData::F64(values)).expect("dims match payload")
    }

    pub fn f32_from_matrix(m: &Matrix) -> Self {
        Self::f32(vec![m.rows() as u64, m.cols() as u64], m.data())
    }

    pub fn f64_from_matrix(m: &Matrix) -> Self {
        Self::f64(vec![m.rows() as u64, m.cols() as u64], m.data().to_vec())
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::new(r as usize, c as usize, self.to_f64()),
            _ => Err(bad(format!("expected rank-2 tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = match self.dtype() {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + width * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        out.push(0);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
            return Err(bad("missing TNSR magic"));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let dtype = match bytes[5] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        let rank = bytes[6] as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let dims: Vec<u64> = bytes[8..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension product overflows"))?;
        let width = if dtype == DType::F32 { 4 } else { 8 };
        let payload = &bytes[header..];
        if (payload.len() as u64) != count.saturating_mul(width) {
            return Err(bad(format!(
                "payload is {} bytes, dims {:?} need {}",
                payload.len(),
                dims,
                count.saturating_mul(width)
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(dims, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

/// Writes to a temporary sibling file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Named tensors, serialized in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| bad(format!("archive has no tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let blobs: Vec<(&String, Vec<u8>)> =
            self.entries.iter().map(|(k, t)| (k, t.encode())).collect();
        let index_len: usize = blobs.iter().map(|(k, _)| 2 + k.len() + 16).sum();
        let mut offset = (12 + index_len) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&[FORMAT_VERSION, 0, 0, 0]);
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, blob) in &blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            offset += blob.len() as u64;
        }
        for (_, blob) in blobs {
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(bad("missing TNSA magic"));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(bad(format!("unsupported archive version {}", bytes[4])));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut pos = 12;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated archive index"))?;
            pos += n;
            Ok(s)
        };
        let mut index = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| bad("archive entry name is not UTF-8"))?
                .to_string();
            let off = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap());
            index.push((name, off, n));
        }
        let mut entries = BTreeMap::new();
        for (name, off, n) in index {
            let end = off.checked_add(n).ok_or_else(|| bad("entry range overflows"))?;
            let blob = usize::try_from(off)
                .ok()
                .zip(usize::try_from(end).ok())
                .and_then(|(a, b)| bytes.get(a..b))
                .ok_or_else(|| bad(format!("entry `{name}` points outside the file")))?;
            let t = Tensor::decode(blob).map_err(|e| bad(format!("entry `{name}`: {e}")))?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::f32(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t.encode();
        assert_eq!(&b[..8], &[b'T', b'N', b'S', b'R', 1, 0, 2, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &3u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24 + 6 * 4);
    }

    #[test]
    fn decode_rejects_corruption() {
        let b = Tensor::f32(vec![4], &[1.0, 2.0, 3.0, 4.0]).encode();
        assert!(Tensor::decode(&b[..b.len() - 1]).is_err());
        let mut wrong_magic = b.clone();
        wrong_magic[0] = b'X';
        assert!(Tensor::decode(&wrong_magic).is_err());
        let mut wrong_dtype = b.clone();
        wrong_dtype[5] = 9;
        assert!(Tensor::decode(&wrong_dtype).is_err());
        let mut wrong_version = b;
        wrong_version[4] = 2;
        assert!(Tensor::decode(&wrong_version).is_err());
    }

    #[test]
    fn archive_rejects_truncation() {
        let mut a = Archive::default();
        a.insert("x", Tensor::f64(vec![2], vec![1.0, 2.0]));
        let bytes = a.encode();
        assert_eq!(Archive::decode(&bytes).unwrap(), a);
        assert!(Archive::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Archive::decode(&bytes[..10]).is_err());
    }

    proptest! {
        #[test]
        fn f64_archives_round_trip(
            a in proptest::collection::vec(-1e6f64..1e6, 1..20),
            b in proptest::collection::vec(-1e3f32..1e3, 1..20),
        ) {
            let mut arc = Archive::default();
            arc.insert("alpha", Tensor::f64(vec![a.len() as u64], a.clone()));
            arc.insert("beta/0", Tensor::new(vec![1, b.len() as u64], TensorData::F32(b)).unwrap());
            let back = Archive::decode(&arc.encode()).unwrap();
            prop_assert_eq!(back, arc);
        }
    }
}
