//! Named-tensor binary container for model weights and optimizer state.
//!
//! Layout (all integers little-endian):
//! `b"PXMT"` magic, u32 version, u64 entry count, then per entry:
//! u32 name length, name bytes (UTF-8), u32 ndim, u64 dims..., f64 payload.
//! f64 round-trips exactly, so a save/load cycle is bitwise lossless.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PXMT";
const VERSION: u32 = 1;

/// Ordered map of tensor name -> array. BTreeMap keeps serialization order
/// canonical regardless of insertion order.
pub type TensorMap = BTreeMap<String, ArrayD<f64>>;

pub fn to_bytes(tensors: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, arr) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let standard = arr.as_standard_layout();
        for &v in standard.as_slice().expect("standard layout") {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<TensorMap> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Data("weight blob: bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "weight blob: unsupported version {version}"
        )));
    }
    let count = cur.u64()? as usize;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("weight blob: invalid tensor name".into()))?;
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| Error::Data(format!("weight blob: bad shape: {e}")))?;
        map.insert(name, arr);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Data("weight blob: trailing bytes".into()));
    }
    Ok(map)
}

pub fn save(path: &Path, tensors: &TensorMap) -> Result<()> {
    super::atomic_write(path, &to_bytes(tensors))
}

pub fn load(path: &Path) -> Result<TensorMap> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("weight blob: truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn roundtrip_bitwise() {
        let mut m = TensorMap::new();
        m.insert(
            "w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3e-17, 4.0, 5.0, f64::MIN_POSITIVE]).unwrap(),
        );
        m.insert("b".into(), ArrayD::from_elem(IxDyn(&[1]), 0.1));
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(m.len(), back.len());
        for (k, v) in &m {
            let r = &back[k];
            assert_eq!(v.shape(), r.shape());
            for (a, b) in v.iter().zip(r.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_blob_rejected() {
        let mut m = TensorMap::new();
        m.insert("w".into(), ArrayD::from_elem(IxDyn(&[4]), 1.0));
        let mut bytes = to_bytes(&m);
        bytes.truncate(bytes.len() - 3);
        assert!(from_bytes(&bytes).is_err());
        assert!(from_bytes(b"NOPE").is_err());
    }
}
