//! Versioned binary checkpoints of named parameter arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "L2ACKPT\0"
//! version u32      currently 1
//! meta    u64 len, JSON bytes
//! count   u64
//! count × { u64 name len, name bytes, u64 ndim, ndim × u64 dims, numel × f64 }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::numerics::{ParameterStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"L2ACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParameterStore,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut Cursor<&[u8]>, n: u64) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if n > remaining {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    let mut v = vec![0u8; n as usize];
    r.read_exact(&mut v)?;
    Ok(v)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        put_u64(&mut buf, meta.len() as u64);
        buf.extend_from_slice(&meta);
        put_u64(&mut buf, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_u64(&mut buf, name.len() as u64);
            buf.extend_from_slice(name.as_bytes());
            put_u64(&mut buf, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut buf, d as u64);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic = get_bytes(&mut r, 8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut vb = [0u8; 4];
        r.read_exact(&mut vb)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let version = u32::from_le_bytes(vb);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = get_u64(&mut r)?;
        let meta = serde_json::from_slice(&get_bytes(&mut r, meta_len)?)?;
        let count = get_u64(&mut r)?;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let name_len = get_u64(&mut r)?;
            let name = String::from_utf8(get_bytes(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = get_u64(&mut r)?;
            let shape = (0..ndim)
                .map(|_| get_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = get_bytes(&mut r, numel as u64 * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), rows in 1usize..4) {
            let cols = values.len();
            let data: Vec<f64> = (0..rows).flat_map(|_| values.iter().copied()).collect();
            let mut params = ParameterStore::new();
            params.insert("a.w", Tensor::matrix(rows, cols, data).unwrap()).unwrap();
            params.insert("b", Tensor::scalar(values[0])).unwrap();
            let ck = Checkpoint { meta: serde_json::json!({"seed": 3}), params };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.meta, ck.meta);
            for ((n1, t1), (n2, t2)) in back.params.iter().zip(ck.params.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn rejects_garbage_and_wrong_version() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint {
            meta: serde_json::Value::Null,
            params: ParameterStore::new(),
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }
}
