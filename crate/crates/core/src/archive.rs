//! Tensor archive: ordered `(name, dtype, shape, little-endian bytes)`
//! records followed by a SHA-256 digest of everything before it.
//!
//! ```text
//! magic "EFTA" | version u32 | count u32
//! repeated: name_len u32 | name | tag u8 | ndim u32 | dims u64* | payload
//! sha256(all preceding bytes)
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{EftError, Result};

pub const MAGIC: &[u8; 4] = b"EFTA";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveTensor {
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
}

impl ArchiveTensor {
    fn tag(&self) -> u8 {
        match self {
            ArchiveTensor::F64(_) => 1,
            ArchiveTensor::I64(_) => 2,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            ArchiveTensor::F64(a) => a.shape(),
            ArchiveTensor::I64(a) => a.shape(),
        }
    }

    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            ArchiveTensor::F64(a) => Ok(a),
            ArchiveTensor::I64(_) => Err(EftError::CorruptArchive("expected f64 tensor, found i64".into())),
        }
    }

    pub fn into_i64(self) -> Result<ArrayD<i64>> {
        match self {
            ArchiveTensor::I64(a) => Ok(a),
            ArchiveTensor::F64(_) => Err(EftError::CorruptArchive("expected i64 tensor, found f64".into())),
        }
    }
}

pub type Record = (String, ArchiveTensor);

fn encode_body(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.tag());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        // Logical (row-major) order regardless of memory layout.
        match tensor {
            ArchiveTensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            ArchiveTensor::I64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 over the canonical encoding of `records`; identical to the
/// trailer of the archive those records would produce.
pub fn content_digest(records: &[Record]) -> String {
    hex(&Sha256::digest(encode_body(records)))
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = encode_body(records);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EftError::CorruptArchive(format!("truncated at byte {}", self.pos)))?;
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

/// Decodes an archive, verifying its trailing digest first. Returns the
/// records and the hex digest.
pub fn decode(bytes: &[u8]) -> Result<(Vec<Record>, String)> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(EftError::CorruptArchive(format!("only {} bytes", bytes.len())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let expected = hex(trailer);
    let found = hex(&Sha256::digest(body));
    if expected != found {
        return Err(EftError::DigestMismatch {
            what: "archive trailer".into(),
            expected,
            found,
        });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(EftError::CorruptArchive("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(EftError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| EftError::CorruptArchive("record name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| EftError::CorruptArchive("shape overflow".into()))?)?;
        let words = payload.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
        let tensor = match tag {
            1 => ArchiveTensor::F64(
                ArrayD::from_shape_vec(IxDyn(&shape), words.map(f64::from_le_bytes).collect())
                    .map_err(|e| EftError::CorruptArchive(e.to_string()))?,
            ),
            2 => ArchiveTensor::I64(
                ArrayD::from_shape_vec(IxDyn(&shape), words.map(i64::from_le_bytes).collect())
                    .map_err(|e| EftError::CorruptArchive(e.to_string()))?,
            ),
            t => return Err(EftError::CorruptArchive(format!("unknown dtype tag {t}"))),
        };
        records.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(EftError::CorruptArchive("trailing bytes after last record".into()));
    }
    Ok((records, found))
}

/// Writes an archive and returns its digest.
pub fn write_file(path: &Path, records: &[Record]) -> Result<String> {
    let bytes = encode(records);
    std::fs::write(path, &bytes).map_err(|e| EftError::io(path, e))?;
    Ok(hex(&bytes[bytes.len() - DIGEST_LEN..]))
}

pub fn read_file(path: &Path) -> Result<(Vec<Record>, String)> {
    let bytes = std::fs::read(path).map_err(|e| EftError::io(path, e))?;
    decode(&bytes)
}
