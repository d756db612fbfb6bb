//! Named parameter storage, the AdamW update, and binary checkpoints.
//!
//! A [`ParamStore`] owns the trainable tensors of one network plus the
//! AdamW moment buffers, keyed by stable insertion order so updates and
//! checkpoints are reproducible. Checkpoints are a small self-describing
//! binary format: magic, JSON manifest, then raw little-endian f64 data.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Gradients, Graph, NodeId, Tensor};

const MAGIC: &[u8; 4] = b"MDCP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamStoreError {
    #[error("parameter {0:?} already exists")]
    Duplicate(String),
    #[error("no gradient reached parameter {0:?}")]
    MissingGradient(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint data truncated")]
    Truncated,
}

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug)]
struct Entry {
    name: String,
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Parameter ids for one store bound into one [`Graph`], in entry order.
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step_count: u64,
    params: Vec<ManifestEntry>,
}

/// Ordered, named collection of trainable tensors with optimizer state.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), ParamStoreError> {
        if self.index.contains_key(name) {
            return Err(ParamStoreError::Duplicate(name.to_string()));
        }
        let n = value.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Copies every parameter into `graph` as a leaf, in entry order.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            ids: self
                .entries
                .iter()
                .map(|e| graph.leaf(e.value.clone()))
                .collect(),
        }
    }

    /// One AdamW step over every parameter. Each parameter must have
    /// received a gradient; a silently detached parameter is a bug in the
    /// calling network, not something to skip over.
    pub fn adamw_step(
        &mut self,
        cfg: &AdamWConfig,
        grads: &Gradients,
        bound: &BoundParams,
    ) -> Result<(), ParamStoreError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (entry, &id) in self.entries.iter_mut().zip(&bound.ids) {
            let g = grads
                .wrt(id)
                .ok_or_else(|| ParamStoreError::MissingGradient(entry.name.clone()))?;
            let gd = g.data();
            let pd = entry.value.data_mut();
            for i in 0..pd.len() {
                entry.m[i] = cfg.beta1 * entry.m[i] + (1.0 - cfg.beta1) * gd[i];
                entry.v[i] = cfg.beta2 * entry.v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                pd[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * pd[i]);
            }
        }
        Ok(())
    }

    /// Writes parameters and optimizer state; the round trip is bitwise.
    pub fn save(&self, path: &Path) -> Result<(), ParamStoreError> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step_count: self.step_count,
            params: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.entries {
            for buf in [e.value.data(), &e.m, &e.v] {
                for &x in buf {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamStoreError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(ParamStoreError::BadMagic);
        }
        let mut len_bytes = [0u8; 8];
        read_exact_or_truncated(&mut r, &mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header = vec![0u8; header_len];
        read_exact_or_truncated(&mut r, &mut header)?;
        let manifest: Manifest = serde_json::from_slice(&header)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ParamStoreError::UnsupportedVersion {
                found: manifest.format_version,
            });
        }
        let mut store = ParamStore::new();
        store.step_count = manifest.step_count;
        for me in manifest.params {
            let n: usize = me.shape.iter().product();
            let value = Tensor::new(me.shape, read_f64s(&mut r, n)?);
            let m = read_f64s(&mut r, n)?;
            let v = read_f64s(&mut r, n)?;
            let idx = store.entries.len();
            if store.index.insert(me.name.clone(), idx).is_some() {
                return Err(ParamStoreError::Duplicate(me.name));
            }
            store.entries.push(Entry {
                name: me.name,
                value,
                m,
                v,
            });
        }
        Ok(store)
    }

    /// True iff values, moments, and step count are all bitwise equal.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.step_count == other.step_count
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && bits_eq(a.value.data(), b.value.data())
                    && bits_eq(&a.m, &b.m)
                    && bits_eq(&a.v, &b.v)
            })
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ParamStoreError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ParamStoreError::Truncated
        } else {
            ParamStoreError::Io(e)
        }
    })
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, ParamStoreError> {
    let mut bytes = vec![0u8; n * 8];
    read_exact_or_truncated(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
