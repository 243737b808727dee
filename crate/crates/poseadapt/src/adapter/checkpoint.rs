//! Checkpoint container.
//!
//! Layout: magic `SPCK`, format version `u16`, tensor count `u32`; per
//! tensor: name length `u16` + UTF-8 name, dtype code `u8` (0 = f64),
//! rank `u8`, dims as `u32`s, then the raw little-endian payload. A CRC-32
//! of everything before it trails the file. Host and adapter checkpoints
//! share the layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

/// Serialize named tensors (order preserved).
pub fn to_bytes(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = body_bytes(tensors)?;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn body_bytes(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(u32::try_from(tensors.len()).expect("tensor count")).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("name too long: {name}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(DTYPE_F64);
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("rank too large for {name}")));
        }
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(u32::try_from(d).expect("dim fits u32")).to_le_bytes());
        }
        t.with_data(|data| {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
    }
    Ok(out)
}

/// Size in bytes that [`to_bytes`] will produce, from shapes alone.
pub fn predicted_size(tensors: &[(String, Tensor)]) -> usize {
    let mut size = 4 + 2 + 4; // magic + version + count
    for (name, t) in tensors {
        size += 2 + name.len() + 1 + 1 + 4 * t.shape().len() + 8 * t.len();
    }
    size + 4 // trailing CRC
}

/// CRC-32 of the serialized body; used as a weight digest. Equals the
/// checkpoint's trailing CRC. (Hashing the whole file would be useless:
/// any message with its own CRC appended hashes to a fixed residue.)
pub fn digest(tensors: &[(String, Tensor)]) -> u32 {
    crc32fast::hash(&body_bytes(tensors).expect("serializable tensors"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

/// Parse checkpoint bytes into `(name, shape, values)` entries.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(Error::Checkpoint("file too small".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype {dtype}"
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(8 * len)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, values));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(out)
}

/// Load checkpoint values into existing parameters, matched by name.
/// Shape mismatches and missing or unknown names are explicit errors that
/// identify the offending tensor.
pub fn load_into(bytes: &[u8], params: &[(String, Tensor)]) -> Result<()> {
    let entries = from_bytes(bytes)?;
    let mut by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> =
        std::collections::HashMap::new();
    for (name, shape, values) in &entries {
        by_name.insert(name.as_str(), (shape, values));
    }
    if entries.len() != params.len() {
        let known: std::collections::HashSet<&str> =
            params.iter().map(|(n, _)| n.as_str()).collect();
        if let Some((name, _, _)) = entries.iter().find(|(n, _, _)| !known.contains(n.as_str())) {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    for (name, param) in params {
        let Some((shape, values)) = by_name.get(name.as_str()) else {
            return Err(Error::Checkpoint(format!("missing tensor {name}")));
        };
        if param.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} does not match model shape {:?}",
                shape,
                param.shape()
            )));
        }
        param.with_data_mut(|d| d.copy_from_slice(values));
    }
    Ok(())
}

pub fn save_file(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, to_bytes(tensors)?)?;
    Ok(())
}

pub fn load_file(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    load_into(&std::fs::read(path)?, params)
}
