//! Binary checkpoint format for parameter sets.
//!
//! Layout: magic "FATC", u32 version, u32 tensor count; per tensor a u16
//! name length, the UTF-8 name, a u8 rank, u32 dims and little-endian f64
//! data. Round-trips are bit-exact, unlike decimal serialization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: u32 = u32::from_le_bytes(*b"FATC");
pub const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"FATC");
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                needed: self.pos + n,
                had: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let found = cur.u32()?;
    if found != MAGIC {
        return Err(Error::BadMagic {
            found,
            expected: MAGIC,
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Config(format!("invalid tensor name: {e}")))?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.f64()?);
        }
        params.insert(&name, Tensor::new(shape, data));
    }
    // The format carries no last-layer designation; restore the classifier
    // head's if those tensors are present.
    let head: Vec<String> = ["head.fc.bias", "head.fc.weight"]
        .iter()
        .filter(|n| params.get(n).is_some())
        .map(|n| n.to_string())
        .collect();
    if !head.is_empty() {
        params.set_last_layer(head);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn round_trip_is_bitwise_identity() {
        let cfg = ModelConfig::default();
        let params = build_model(&cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fatc");
        save_checkpoint(&params, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), params.len());
        for ((na, ta), (nb, tb)) in params.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(back.last_layer_names(), params.last_layer_names());
    }

    #[test]
    fn three_tensor_header_count() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![2], vec![1.0, 2.0]));
        p.insert("b", Tensor::new(vec![1], vec![3.0]));
        p.insert("c", Tensor::new(vec![2, 2], vec![0.0; 4]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fatc");
        save_checkpoint(&p, &path).unwrap();
        // Independent header parse: bytes 8..12 hold the tensor count.
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FATC");
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        assert_eq!(count, 3);
    }

    #[test]
    fn corrupted_magic_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fatc");
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![1], vec![1.0]));
        save_checkpoint(&p, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn wrong_version_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.fatc");
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![1], vec![1.0]));
        save_checkpoint(&p, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncated_file_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.fatc");
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        save_checkpoint(&p, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Truncated { .. })
        ));
    }
}
