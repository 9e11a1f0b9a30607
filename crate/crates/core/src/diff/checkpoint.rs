//! Checkpoint files: one JSON header line listing `(name, shape, dtype, offset)`
//! followed by a little-endian blob holding the arrays back to back.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    dtype: Dtype,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

/// An array together with the precision it is stored at.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: Dtype,
    pub data: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, data: Array2<f64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            dtype,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let (r, c) = a.data.dim();
            entries.push(Entry {
                name: a.name.clone(),
                shape: [r, c],
                dtype: a.dtype,
                offset,
            });
            offset += r * c * a.dtype.size();
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset);
        for a in &self.arrays {
            for &x in a.data.iter() {
                match a.dtype {
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_reader<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::Checkpoint(format!("reading header: {e}")))?;
        let header: Header = serde_json::from_slice(&line)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} (this build reads {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut blob = Vec::new();
        reader
            .read_to_end(&mut blob)
            .map_err(|e| Error::Checkpoint(format!("reading blob: {e}")))?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let [r, c] = e.shape;
            let size = e.dtype.size();
            let end = e.offset + r * c * size;
            let bytes = blob
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("array {} truncated", e.name)))?;
            let values: Vec<f64> = bytes
                .chunks_exact(size)
                .map(|b| match e.dtype {
                    Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
                    Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
                })
                .collect();
            let data = Array2::from_shape_vec((r, c), values)
                .map_err(|err| Error::Checkpoint(format!("array {}: {err}", e.name)))?;
            arrays.push(NamedArray {
                name: e.name,
                dtype: e.dtype,
                data,
            });
        }
        Ok(Checkpoint {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_mixed_precision() {
        let mut ck = Checkpoint::new(serde_json::json!({"epoch": 3}));
        ck.push("w", Dtype::F32, array![[1.0, 2.5], [-3.0, 0.1]]);
        ck.push("m", Dtype::F64, array![[0.1, 1e-300, -7.25]]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_reader(&bytes[..]).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        assert_eq!(back.get("m").unwrap().data, ck.get("m").unwrap().data);
        let w = &back.get("w").unwrap().data;
        assert_eq!(w[[1, 1]], 0.1f32 as f64);
        assert_eq!(w[[0, 1]], 2.5);
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push("w", Dtype::F64, array![[1.0, 2.0]]);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_reader(&bytes[..bytes.len() - 1]).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("\"version\":1", "\"version\":99");
        assert!(matches!(
            Checkpoint::from_reader(text.as_bytes()),
            Err(Error::Checkpoint(_))
        ));
    }
}
