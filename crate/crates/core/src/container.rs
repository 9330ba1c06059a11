//! Single-file archive: a JSON header followed by named raw array blobs.
//!
//! Layout:
//!
//! ```text
//! magic "MDBLOBS1" | u64 LE header length | header JSON | blob data...
//! ```
//!
//! The header embeds a caller-supplied JSON value plus a directory of
//! blobs `(name, dtype, shape, offset, byte length)`; blob data is stored
//! little-endian in directory order. Both checkpoints and dataset caches
//! use this container, so artifacts are byte-identical across reruns.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDBLOBS1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

/// Accumulates named arrays and writes them with a header in one pass.
pub struct ContainerWriter {
    meta: serde_json::Value,
    entries: IndexMap<String, (String, Vec<usize>, Vec<u8>)>,
}

impl ContainerWriter {
    pub fn new<M: Serialize>(meta: &M) -> Result<Self> {
        Ok(ContainerWriter {
            meta: serde_json::to_value(meta)?,
            entries: IndexMap::new(),
        })
    }

    pub fn add_f64(&mut self, name: &str, arr: &ArrayD<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate blob name {name:?}")));
        }
        let mut bytes = Vec::with_capacity(arr.len() * 8);
        for v in arr.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries
            .insert(name.to_string(), ("f64".into(), arr.shape().to_vec(), bytes));
        Ok(())
    }

    pub fn add_u8(&mut self, name: &str, shape: &[usize], data: &[u8]) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate blob name {name:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "blob {name:?}: shape {shape:?} does not hold {} bytes",
                data.len()
            )));
        }
        self.entries
            .insert(name.to_string(), ("u8".into(), shape.to_vec(), data.to_vec()));
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut blobs = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, (dtype, shape, bytes)) in &self.entries {
            blobs.push(BlobEntry {
                name: name.clone(),
                dtype: dtype.clone(),
                shape: shape.clone(),
                offset,
                byte_len: bytes.len() as u64,
            });
            offset += bytes.len() as u64;
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), blobs })?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for (_, (_, _, bytes)) in &self.entries {
            f.write_all(bytes)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// A fully loaded container.
pub struct Container {
    meta: serde_json::Value,
    blobs: IndexMap<String, (String, Vec<usize>, Vec<u8>)>,
}

impl Container {
    pub fn read_from(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a container file (bad magic)",
                path.display()
            )));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;

        let mut blobs = IndexMap::new();
        for e in header.blobs {
            let start = e.offset as usize;
            let end = start + e.byte_len as usize;
            if end > data.len() {
                return Err(Error::Checkpoint(format!(
                    "blob {:?} extends past end of file",
                    e.name
                )));
            }
            blobs.insert(e.name, (e.dtype, e.shape, data[start..end].to_vec()));
        }
        Ok(Container { meta: header.meta, blobs })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(|s| s.as_str())
    }

    pub fn get_f64(&self, name: &str) -> Result<ArrayD<f64>> {
        let (dtype, shape, bytes) = self
            .blobs
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {name:?}")))?;
        if dtype != "f64" {
            return Err(Error::Checkpoint(format!("blob {name:?} is {dtype}, not f64")));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals)
            .map_err(|e| Error::Checkpoint(format!("blob {name:?}: {e}")))
    }

    pub fn get_u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let (dtype, shape, bytes) = self
            .blobs
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {name:?}")))?;
        if dtype != "u8" {
            return Err(Error::Checkpoint(format!("blob {name:?} is {dtype}, not u8")));
        }
        Ok((shape.clone(), bytes.clone()))
    }
}
