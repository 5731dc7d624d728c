//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "SPTRNCK1"
//! dtype        u8        4 = f32, 8 = f64
//! count        u32       number of tensors
//! count × {
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   values     product(dims) × element, little-endian IEEE-754
//! }
//! ```
//!
//! Entries appear in parameter registration order, so writing the same
//! parameters twice yields identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPTRNCK1";

pub fn encode<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE_TAG);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let tag = r.take(1)?[0];
    if tag != T::DTYPE_TAG {
        return Err(Error::Checkpoint(format!("element tag {tag} does not match requested precision {}", T::DTYPE_TAG)));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode(params))?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Overwrites every parameter of `params` with the matching checkpoint entry.
pub fn load_into<T: Scalar>(params: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let entries = decode::<T>(&fs::read(path)?)?;
    if entries.len() != params.len() {
        return Err(Error::Checkpoint(format!("{} tensors in file, model has {}", entries.len(), params.len())));
    }
    for (name, tensor) in entries {
        let id = params.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let target = params.get_mut(id);
        if target.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: file shape {:?}, model shape {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.5, 0.0]).unwrap());
        s.add("b.bias", Tensor::from_f64(&[3], &[0.25, 0.5, -0.75]).unwrap());
        s
    }

    #[test]
    fn layout_is_documented() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes[8], 4);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        // first entry: name "a", 2 dims, 4 floats
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 1);
        assert_eq!(bytes[17], b'a');
        assert_eq!(bytes.len(), 13 + (4 + 1 + 4 + 16 + 16) + (4 + 6 + 4 + 8 + 12));
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let src = store();
        save(&src, &path).unwrap();
        let mut dst = store();
        dst.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(9.0));
        load_into(&mut dst, &path).unwrap();
        let a: Vec<_> = src.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect();
        let b: Vec<_> = dst.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_precision_and_truncation() {
        let bytes = encode(&store());
        assert!(decode::<f64>(&bytes).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(b"NOTMAGIC").is_err());
    }
}
