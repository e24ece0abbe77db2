//! Named parameter store, Adam updates and checkpoint serialization.
//!
//! A checkpoint is two files: `<stem>.json`, a UTF-8 manifest listing
//! `{name, shape, dtype, offset, len}` per tensor plus an embedded config
//! value, and `<stem>.bin`, one contiguous blob of little-endian f32 in
//! manifest order. Round-trips are bit-exact. Optimizer state is
//! per-training-stage and is not serialized.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{Error, Result, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    /// Adam first moment.
    m: Vec<f32>,
    /// Adam second moment.
    v: Vec<f32>,
    /// Update counter for bias correction.
    step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Param {
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Uniquely named parameter tensors with per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "set {name}: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Bias-corrected Adam step over exactly the parameters named in
    /// `grads`; every other parameter (and its moments) is untouched.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
        cfg: AdamConfig,
    ) -> Result<()> {
        for (name, grad) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown {name}")))?;
            if grad.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} vs parameter {:?} for {name}",
                    grad.shape(),
                    p.value.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = grad.data()[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    config: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

/// Write `<stem>.json` + `<stem>.bin`.
pub fn save_checkpoint(store: &ParamStore, config: &serde_json::Value, stem: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_values() * 4);
    for (name, tensor) in store.iter() {
        let offset = blob.len() as u64;
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest encode: {e}")))?;
    std::fs::File::create(stem.with_extension("json"))?.write_all(json.as_bytes())?;
    std::fs::File::create(stem.with_extension("bin"))?.write_all(&blob)?;
    Ok(())
}

/// Read a checkpoint back; returns the store and the embedded config value.
pub fn load_checkpoint(stem: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut json = String::new();
    std::fs::File::open(stem.with_extension("json"))?.read_to_string(&mut json)?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Parse(format!("manifest decode: {e}")))?;
    let mut blob = Vec::new();
    std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut blob)?;
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        if e.dtype != "f32" {
            return Err(Error::Parse(format!("unsupported dtype {}", e.dtype)));
        }
        let start = e.offset as usize;
        let end = start + e.len as usize;
        if end > blob.len() || e.len % 4 != 0 {
            return Err(Error::Parse(format!("bad blob range for {}", e.name)));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((store, manifest.config))
}
