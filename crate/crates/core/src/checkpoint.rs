//! Binary container used for model files and loop checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | field        | size                                   |
//! |--------------|----------------------------------------|
//! | magic        | 8 bytes, `SLOTDISC`                    |
//! | kind         | 8 bytes, NUL padded (`MODEL`, `ALSTATE`) |
//! | version      | u32                                    |
//! | header       | u64 length + UTF-8 JSON                |
//! | tensor count | u32                                    |
//! | tensors      | u32 name length, name, u32 rank, u64 per dim, f64 data |
//! | digest       | 32 bytes, SHA-256 of everything above  |
//!
//! Tensors are stored as raw IEEE-754 bits, so save/load is bit-exact.
//! Writes go to a temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SLOTDISC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array2(name: &str, a: &Array2<f64>) -> Self {
        Tensor {
            name: name.to_owned(),
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array1(name: &str, a: &Array1<f64>) -> Self {
        Tensor {
            name: name.to_owned(),
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    pub fn into_array2(self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        if self.shape != [rows, cols] {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected [{rows}, {cols}]",
                self.name, self.shape
            )));
        }
        Array2::from_shape_vec((rows, cols), self.data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn into_array1(self, len: usize) -> Result<Array1<f64>> {
        if self.shape != [len] {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected [{len}]",
                self.name, self.shape
            )));
        }
        Ok(Array1::from(self.data))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

fn kind_bytes(kind: &str) -> Result<[u8; 8]> {
    let b = kind.as_bytes();
    if b.len() > 8 {
        return Err(Error::Checkpoint(format!("kind `{kind}` longer than 8 bytes")));
    }
    let mut out = [0u8; 8];
    out[..b.len()].copy_from_slice(b);
    Ok(out)
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&kind_bytes(&self.kind)?);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} shape {:?} does not match {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            buf.reserve(t.data.len() * 8);
            for x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self> {
        if bytes.len() < 8 + 8 + 4 + 8 + 4 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let kind = r.take(8)?;
        if kind != kind_bytes(expected_kind)? {
            return Err(Error::Checkpoint(format!(
                "expected a {expected_kind} file, found {}",
                String::from_utf8_lossy(kind).trim_end_matches('\0')
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: serde_json::Value = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Container {
            kind: expected_kind.to_owned(),
            header,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_kind)
    }
}

/// Writes via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
        f.sync_all().map_err(|e| Error::io(tmp, e))?;
    }
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            kind: "MODEL".into(),
            header: serde_json::json!({"a": 1, "x": 0.1}),
            tensors: vec![
                Tensor {
                    name: "w".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300],
                },
                Tensor {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![0.1 + 0.2],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes, "MODEL").unwrap();
        for (a, b) in c.tensors.iter().zip(&back.tensors) {
            let abits: Vec<u64> = a.data.iter().map(|x| x.to_bits()).collect();
            let bbits: Vec<u64> = b.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
        assert_eq!(back.header, c.header);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn detects_corruption_and_wrong_kind() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes, "ALSTATE").is_err());
        bytes[40] ^= 0xFF;
        let err = Container::from_bytes(&bytes, "MODEL").unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert!(Container::from_bytes(&bytes[..10], "MODEL").is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 32);
        bytes[16..20].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        let err = Container::from_bytes(&bytes, "MODEL").unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn atomic_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        sample().save(&path).unwrap();
        assert_eq!(Container::load(&path, "MODEL").unwrap(), {
            let mut c = sample();
            c.kind = "MODEL".into();
            c
        });
        assert!(!dir.path().join("m.bin.tmp").exists());
    }
}
