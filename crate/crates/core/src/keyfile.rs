//! Bit-exact verification key file format.
//!
//! Layout: magic `"NIMK"`, `u8` version, `u16` key channels, `u16` key
//! height, `u16` key width, `u32` message length, 32-byte SHA-256 digest of
//! the codec weights, then `ceil(cells / 8)` bytes of row-major bit-packed
//! key, most significant bit first. Multi-byte integers are big-endian.
//! Unused padding bits in the final byte must be zero.
//!
//! Writes go through a temporary file in the destination directory and a
//! rename, so readers never observe a half-written key.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::codec::{VerificationKey, KEY_VERSION};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NIMK";
const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 2 + 4 + 32;

fn malformed(offset: usize, what: impl Into<String>) -> Error {
    Error::MalformedKey { offset, what: what.into() }
}

/// Serializes a key to its on-disk byte layout.
pub fn key_bytes(key: &VerificationKey, msg_len: usize) -> Result<Vec<u8>> {
    key.validate()?;
    let (c, h, w) = key.bits.dim();
    for (dim, name) in [(c, "channels"), (h, "height"), (w, "width")] {
        if dim == 0 || dim > u16::MAX as usize {
            return Err(Error::input(format!("key {name} {dim} not encodable as u16")));
        }
    }
    if msg_len == 0 || msg_len > u32::MAX as usize {
        return Err(Error::input(format!("message length {msg_len} not encodable as u32")));
    }
    let cells = c * h * w;
    let mut out = Vec::with_capacity(HEADER_LEN + cells.div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.push(key.version);
    out.extend_from_slice(&(c as u16).to_be_bytes());
    out.extend_from_slice(&(h as u16).to_be_bytes());
    out.extend_from_slice(&(w as u16).to_be_bytes());
    out.extend_from_slice(&(msg_len as u32).to_be_bytes());
    out.extend_from_slice(&key.digest);
    let mut byte = 0u8;
    for (i, bit) in key.bits.iter().enumerate() {
        byte |= bit << (7 - (i % 8));
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if cells % 8 != 0 {
        out.push(byte);
    }
    Ok(out)
}

/// Parses the on-disk byte layout. Returns the key and the message length
/// recorded alongside it.
pub fn parse_key(bytes: &[u8]) -> Result<(VerificationKey, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    let version = bytes[4];
    if version != KEY_VERSION {
        return Err(malformed(4, format!("unsupported version {version}")));
    }
    let c = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
    let h = u16::from_be_bytes([bytes[7], bytes[8]]) as usize;
    let w = u16::from_be_bytes([bytes[9], bytes[10]]) as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(malformed(5, "zero key dimension"));
    }
    let msg_len = u32::from_be_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]) as usize;
    if msg_len == 0 {
        return Err(malformed(11, "zero message length"));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(&bytes[15..47]);

    let cells = c * h * w;
    let packed = cells.div_ceil(8);
    if bytes.len() != HEADER_LEN + packed {
        return Err(malformed(
            bytes.len().min(HEADER_LEN + packed),
            format!("body holds {} bytes, expected {packed}", bytes.len() - HEADER_LEN),
        ));
    }
    let body = &bytes[HEADER_LEN..];
    let mut bits = Vec::with_capacity(cells);
    for i in 0..cells {
        bits.push((body[i / 8] >> (7 - (i % 8))) & 1);
    }
    // Bit-exactness: padding must be zero so a key has one byte encoding.
    if cells % 8 != 0 {
        let tail = body[packed - 1] & ((1u8 << (8 - cells % 8)) - 1);
        if tail != 0 {
            return Err(malformed(HEADER_LEN + packed - 1, "nonzero padding bits"));
        }
    }
    let bits = Array3::from_shape_vec((c, h, w), bits).expect("cell count");
    Ok((VerificationKey { bits, version, digest, seed: None }, msg_len))
}

/// Writes a key file atomically.
pub fn write_key(path: &Path, key: &VerificationKey, msg_len: usize) -> Result<()> {
    let bytes = key_bytes(key, msg_len)?;
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

/// Reads and validates a key file.
pub fn read_key(path: &Path) -> Result<(VerificationKey, usize)> {
    parse_key(&fs::read(path)?)
}
