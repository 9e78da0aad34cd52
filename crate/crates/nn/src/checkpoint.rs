//! Checkpoint container shared by every trained model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DXPRCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      4     header length H in bytes (u32)
//! 16      H     UTF-8 JSON header
//! 16+H    ...   payload: f32 values of every array, concatenated in header order
//! ```
//!
//! The JSON header is `{"kind": string, "metadata": any, "arrays": [{"name",
//! "shape", "offset", "len"}]}` where `offset`/`len` count f32 elements from
//! the start of the payload. `metadata` carries training information such as
//! epoch, losses and seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

pub const MAGIC: &[u8; 8] = b"DXPRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Checkpoint {
    pub fn new(
        kind: impl Into<String>,
        metadata: serde_json::Value,
        arrays: Vec<NamedArray>,
    ) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(NnError::Checkpoint(format!(
                    "array {} has {} values for shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset,
                len: a.data.len(),
            });
            offset += a.data.len();
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            arrays: entries,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut payload = Vec::with_capacity(offset * 4);
        for a in &self.arrays {
            for v in &a.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut fixed = [0u8; 16];
        r.read_exact(&mut fixed)
            .map_err(|_| NnError::Checkpoint("file too short for a checkpoint header".into()))?;
        if &fixed[..8] != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)
            .map_err(|_| NnError::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 4 != 0 {
            return Err(NnError::Checkpoint(
                "payload is not a whole number of f32 values".into(),
            ));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let expected: usize = e.shape.iter().product();
            if expected != e.len || e.offset + e.len > values.len() {
                return Err(NnError::Checkpoint(format!(
                    "array {} is inconsistent with the payload",
                    e.name
                )));
            }
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: values[e.offset..e.offset + e.len].to_vec(),
            });
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}
