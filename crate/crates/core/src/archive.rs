//! Single-file tensor archive used for backbone, encoder and prompt-store checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MPARCH01"
//! meta_len   u32
//! metadata   meta_len bytes of JSON
//! n_tensors  u32
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8,  dims u64 × ndim
//!   data     f64 × prod(dims)
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MPARCH01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::integrity(name, "tensor missing from archive"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.metadata).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::integrity("magic", "not a modalprompt archive"));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let metadata: serde_json::Value = serde_json::from_slice(meta)
            .map_err(|e| Error::integrity("metadata", e.to_string()))?;
        let n = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for i in 0..n {
            let field = format!("tensor[{i}]");
            let name_len = r.u16(&format!("{field}.name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("{field}.name"))?)
                .map_err(|_| Error::integrity(format!("{field}.name"), "invalid UTF-8"))?
                .to_string();
            let ndim = r.take(1, &format!("{name}.ndim"))?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&format!("{name}.shape"))? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count.saturating_mul(8), &format!("{name}.data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let body_end = r.pos;
        let stored = r.take(32, "checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::integrity(
                "checksum",
                "trailing bytes after checksum",
            ));
        }
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != stored {
            return Err(Error::integrity(
                "checksum",
                "content does not match stored digest",
            ));
        }
        Ok(Archive { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::integrity(
                field,
                format!(
                    "truncated: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len().saturating_sub(self.pos)
                ),
            )),
        }
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        Archive {
            metadata: serde_json::json!({"kind": "test", "m": 10}),
            tensors: vec![
                NamedTensor::new("a", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX]),
                NamedTensor::new("b", vec![1], vec![-0.0]),
            ],
        }
    }

    #[test]
    fn truncation_names_the_offending_field() {
        let bytes = sample().to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 40]).unwrap_err();
        match err {
            Error::Integrity { field, .. } => assert_eq!(field, "b.data"),
            other => panic!("unexpected {other:?}"),
        }
        let err = Archive::from_bytes(&bytes[..5]).unwrap_err();
        assert!(matches!(err, Error::Integrity { ref field, .. } if field == "magic"));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 0x01;
        let err = Archive::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Integrity { ref field, .. } if field == "checksum"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(data in proptest::collection::vec(any::<f64>(), 0..64)) {
            let a = Archive {
                metadata: serde_json::json!({"n": data.len()}),
                tensors: vec![NamedTensor::new("x", vec![data.len()], data.clone())],
            };
            let back = Archive::from_bytes(&a.to_bytes()).unwrap();
            let got: Vec<u64> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
