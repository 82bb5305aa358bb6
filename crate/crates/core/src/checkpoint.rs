//! `DTRC` container: magic, format version, JSON header length, JSON header,
//! then raw little-endian tensor bytes in table order.
//!
//! ```text
//! "DTRC" | u32 version | u64 header_len | header (UTF-8 JSON) | payload
//! ```
//!
//! The header is an object whose `tensors` member lists
//! `{name, dtype, shape, offset, nbytes}` with offsets relative to the start
//! of the payload.

use std::path::Path;

use numkit::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{DatrError, Result};

pub const MAGIC: &[u8; 4] = b"DTRC";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_of());
        T::to_le_bytes_vec(t.data(), &mut bytes);
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(DatrError::Format(format!(
                "tensor {}: stored as {:?}, requested {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(Tensor::from_vec(&self.shape, T::from_le_bytes_slice(&self.bytes))?)
    }
}

/// Serialize `header` (a JSON object) and tensors into container bytes.
pub fn encode(header: Map<String, Value>, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut table = Vec::with_capacity(tensors.len());
    for t in tensors {
        let expected = t.shape.iter().product::<usize>() * t.dtype.size_of();
        if expected != t.bytes.len() {
            return Err(DatrError::Integrity(format!(
                "tensor {}: {} bytes for shape {:?}",
                t.name,
                t.bytes.len(),
                t.shape
            )));
        }
        table.push(TensorEntry {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            offset,
            nbytes: t.bytes.len() as u64,
        });
        offset += t.bytes.len() as u64;
    }
    let mut header = header;
    header.insert(
        "tensors".into(),
        serde_json::to_value(&table).map_err(|e| DatrError::Format(e.to_string()))?,
    );
    let json = serde_json::to_vec(&Value::Object(header)).map_err(|e| DatrError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

/// Parse container bytes into the header object (without `tensors`) and
/// the tensors.
pub fn decode(bytes: &[u8]) -> Result<(Map<String, Value>, Vec<NamedTensor>)> {
    if bytes.len() < PREFIX || &bytes[..4] != MAGIC {
        return Err(DatrError::Format("not a DTRC checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(DatrError::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = PREFIX
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| DatrError::Integrity(format!("header of {hlen} bytes exceeds file size {}", bytes.len())))?;
    let mut header: Map<String, Value> = match serde_json::from_slice(&bytes[PREFIX..hend]) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(DatrError::Format("checkpoint header is not a JSON object".into())),
        Err(e) => return Err(DatrError::Format(format!("checkpoint header: {e}"))),
    };
    let table: Vec<TensorEntry> = serde_json::from_value(header.remove("tensors").unwrap_or(Value::Array(vec![])))
        .map_err(|e| DatrError::Format(format!("tensor table: {e}")))?;
    let payload = &bytes[hend..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(table.len());
    for e in table {
        if e.offset != expected_offset {
            return Err(DatrError::Integrity(format!(
                "tensor {}: offset {} breaks the contiguous table (expected {expected_offset})",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if (numel * e.dtype.size_of()) as u64 != e.nbytes {
            return Err(DatrError::Integrity(format!("tensor {}: nbytes {} disagrees with shape", e.name, e.nbytes)));
        }
        let end = e.offset + e.nbytes;
        if end > payload.len() as u64 {
            return Err(DatrError::Integrity(format!(
                "tensor {}: payload truncated ({} of {} bytes present)",
                e.name,
                (payload.len() as u64).saturating_sub(e.offset),
                e.nbytes
            )));
        }
        tensors.push(NamedTensor {
            name: e.name,
            dtype: e.dtype,
            shape: e.shape,
            bytes: payload[e.offset as usize..end as usize].to_vec(),
        });
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(DatrError::Integrity(format!(
            "payload has {} bytes, tensor table covers {expected_offset}",
            payload.len()
        )));
    }
    Ok((header, tensors))
}

pub fn write_file(path: &Path, header: Map<String, Value>, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(header, tensors)?;
    std::fs::write(path, bytes).map_err(|e| DatrError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<(Map<String, Value>, Vec<NamedTensor>)> {
    let bytes = std::fs::read(path).map_err(|e| DatrError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        DatrError::Integrity(m) => DatrError::Integrity(format!("{}: {m}", path.display())),
        DatrError::Format(m) => DatrError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Header JSON alone, for inspection with generic tools.
pub fn header_json(bytes: &[u8]) -> Result<&str> {
    if bytes.len() < PREFIX || &bytes[..4] != MAGIC {
        return Err(DatrError::Format("not a DTRC checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = (PREFIX + hlen).min(bytes.len());
    std::str::from_utf8(&bytes[PREFIX..end]).map_err(|e| DatrError::Format(e.to_string()))
}
