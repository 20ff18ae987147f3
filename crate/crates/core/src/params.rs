//! Named parameter storage and the binary checkpoint format.
//!
//! A checkpoint is an 8-byte little-endian header length, a JSON header
//! mapping parameter names to `{shape, offset}` (byte offsets relative to the
//! start of the payload), then the payload: every parameter as little-endian
//! `f64` in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered collection of named model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    params: BTreeMap<String, HeaderEntry>,
}

const FORMAT: &str = "vlmoe-checkpoint-v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = BTreeMap::new();
        let mut offset = 0;
        for e in &self.entries {
            params.insert(
                e.name.clone(),
                HeaderEntry {
                    shape: e.value.shape().to_vec(),
                    offset,
                },
            );
            offset += e.value.numel() * 8;
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT.to_string(),
            params,
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.entries {
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint into a new store, in payload order.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.format != FORMAT {
            return Err(contract(format!(
                "unknown checkpoint format {}",
                header.format
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut ordered: Vec<_> = header.params.into_iter().collect();
        ordered.sort_by_key(|(_, e)| e.offset);
        let mut store = ParamStore::new();
        for (name, e) in ordered {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * 8;
            if end > payload.len() {
                return Err(contract(format!("checkpoint truncated at {name}")));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            store.add(name, Tensor::new(e.shape, data)?);
        }
        Ok(store)
    }

    /// Overwrites values in `self` from a checkpoint with the same names and
    /// shapes, keeping trainability flags.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let src = other
                .get(&name)
                .ok_or_else(|| contract(format!("checkpoint lacks parameter {name}")))?;
            self.set(id, src.clone())?;
        }
        Ok(())
    }
}
