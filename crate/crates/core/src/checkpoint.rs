//! Model checkpoint format.
//!
//! Layout: magic `"NIMC"`, `u8` version, `u32` config length, that many
//! bytes of UTF-8 config JSON, `u32` tensor count, the canonical tensor
//! stream, and a trailing 32-byte SHA-256 digest of the stream. Multi-byte
//! integers are big-endian; tensor data is f32 little-endian.
//!
//! The canonical tensor stream is also what the codec hashes into key files,
//! so a key's weight digest can be checked against a checkpoint without
//! loading the model.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NIMC";
const VERSION: u8 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

/// Canonical byte encoding of named tensors: per tensor, big-endian name
/// length, name bytes, dimension count, dimensions, then f32 LE data.
pub fn tensor_stream(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_be_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_be_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// SHA-256 of the canonical tensor stream.
pub fn stream_digest(tensors: &[NamedTensor]) -> [u8; 32] {
    Sha256::digest(tensor_stream(tensors)).into()
}

/// Writes a checkpoint atomically.
pub fn save_checkpoint(path: &Path, config_json: &str, tensors: &[NamedTensor]) -> Result<()> {
    let stream = tensor_stream(tensors);
    let mut bytes = Vec::with_capacity(stream.len() + config_json.len() + 64);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(config_json.len() as u32).to_be_bytes());
    bytes.extend_from_slice(config_json.as_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&stream);
    let digest: [u8; 32] = Sha256::digest(&stream).into();
    bytes.extend_from_slice(&digest);

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(&bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "truncated at byte {} reading {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Reads a checkpoint, returning the config JSON and tensors. The tensor
/// stream digest is verified before anything is returned.
pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<NamedTensor>)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = cur.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::MalformedCheckpoint(format!("unsupported version {version}")));
    }
    let config_len = cur.u32("config length")?;
    let config = std::str::from_utf8(cur.take(config_len, "config")?)
        .map_err(|_| Error::MalformedCheckpoint("config is not UTF-8".into()))?
        .to_string();
    let count = cur.u32("tensor count")?;

    let stream_start = cur.pos;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = cur.u32("name length")?;
        if name_len > 4096 {
            return Err(Error::MalformedCheckpoint(format!("tensor {i}: absurd name length")));
        }
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::MalformedCheckpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndim = cur.u32("dimension count")?;
        if ndim > 8 {
            return Err(Error::MalformedCheckpoint(format!("tensor {name}: {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dimension")?);
        }
        let count: usize = shape.iter().product();
        if count.checked_mul(4).is_none_or(|n| cur.pos + n + 32 > bytes.len()) {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor {name}: {count} elements exceed the file"
            )));
        }
        let raw = cur.take(count * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    let stream_end = cur.pos;
    let digest = cur.take(32, "digest")?;
    if cur.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let want: [u8; 32] = Sha256::digest(&bytes[stream_start..stream_end]).into();
    if digest != want {
        return Err(Error::DigestMismatch);
    }
    Ok((config, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            ("a.w".into(), vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 4.0, -0.125]),
            ("a.b".into(), vec![2], vec![0.5, -0.5]),
        ]
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, r#"{"epochs":30}"#, &sample()).unwrap();
        let (config, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(config, r#"{"epochs":30}"#);
        assert_eq!(tensors, sample());
    }

    #[test]
    fn digest_guards_tensor_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, "{}", &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Flip one bit inside the tensor stream (past header + config).
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::DigestMismatch)));
    }

    #[test]
    fn structural_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, "{}", &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedCheckpoint(_))));

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedCheckpoint(_))));

        let mut bad = bytes.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedCheckpoint(_))));

        let mut long = bytes.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedCheckpoint(_))));
    }

    #[test]
    fn stream_digest_is_stable_and_sensitive() {
        let d1 = stream_digest(&sample());
        let d2 = stream_digest(&sample());
        assert_eq!(d1, d2);
        let mut other = sample();
        other[0].2[0] += 1.0;
        assert_ne!(d1, stream_digest(&other));
        // Name changes matter too.
        let mut renamed = sample();
        renamed[0].0 = "b.w".into();
        assert_ne!(d1, stream_digest(&renamed));
    }
}
