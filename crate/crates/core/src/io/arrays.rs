//! A small self-describing container for named arrays.
//!
//! Layout: `MAGIC`, a little-endian `u32` header length, a JSON header
//! listing each array's name, dtype, shape and byte range, then the
//! payload. `f32` values are little-endian; `bool` values are one byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"LGARR1\n";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    Bool(Vec<bool>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            Self::F32(_) => Dtype::F32,
            Self::Bool(_) => Dtype::Bool,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: &str, shape: &[usize], values: impl IntoIterator<Item = f32>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: ArrayData::F32(values.into_iter().collect()),
        }
    }

    pub fn bool(name: &str, shape: &[usize], values: impl IntoIterator<Item = bool>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: ArrayData::Bool(values.into_iter().collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Dtype {
    F32,
    Bool,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::Bool => 1,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arrays: Vec<Entry>,
}

pub fn encode_arrays(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        let expected: usize = a.shape.iter().product();
        if expected != a.data.len() {
            return Err(Error::Container(format!(
                "array `{}` has {} values for shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
        let offset = payload.len();
        match &a.data {
            ArrayData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            ArrayData::Bool(v) => payload.extend(v.iter().map(|&b| b as u8)),
        }
        entries.push(Entry {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.shape.clone(),
            offset,
            len: payload.len() - offset,
        });
    }
    let header = serde_json::to_vec(&Header { arrays: entries })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Container("header too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let bad = |m: &str| Error::Container(m.to_string());
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
    if rest.len() < 4 {
        return Err(bad("truncated header length"));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])?;
    let payload = &rest[header_len..];
    header
        .arrays
        .into_iter()
        .map(|e| {
            let count: usize = e.shape.iter().product();
            if e.len != count * e.dtype.width() {
                return Err(bad(&format!("array `{}` length disagrees with its shape", e.name)));
            }
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| bad(&format!("array `{}` runs past the payload", e.name)))?;
            let data = match e.dtype {
                Dtype::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                Dtype::Bool => ArrayData::Bool(raw.iter().map(|&b| b != 0).collect()),
            };
            Ok(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            })
        })
        .collect()
}

pub fn write_arrays(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    std::fs::write(path, encode_arrays(arrays)?)?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<Vec<NamedArray>> {
    decode_arrays(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let arrays = vec![
            NamedArray::f32("c_ref", &[2, 3], [0.5, -1.0, 2.25, 0.0, 1e-7, 3.0]),
            NamedArray::bool("mask", &[2, 2], [true, false, false, true]),
        ];
        let bytes = encode_arrays(&arrays).unwrap();
        assert!(bytes.starts_with(MAGIC));
        assert_eq!(decode_arrays(&bytes).unwrap(), arrays);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = NamedArray::f32("x", &[2, 2], [1.0]);
        assert!(matches!(encode_arrays(&[a]), Err(Error::Container(_))));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = encode_arrays(&[NamedArray::f32("x", &[4], [1.0; 4])]).unwrap();
        assert!(decode_arrays(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_arrays(b"nope").is_err());
    }
}
