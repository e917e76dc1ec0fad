//! Named parameter storage, the RMSProp update, and the checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// One named parameter: value, gradient slot, and RMSProp state. Buffers
/// (running statistics and the like) are stored with `trainable = false`
/// and ignored by the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Mean-square accumulator.
    pub ms: Tensor,
    /// Momentum (velocity) buffer on the preconditioned step.
    pub vel: Tensor,
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            ms: Tensor::zeros(&shape),
            vel: Tensor::zeros(&shape),
            trainable,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} already registered"
        );
        self.params.insert(name.to_string(), Param::new(value, true));
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} already registered"
        );
        self.params
            .insert(name.to_string(), Param::new(value, false));
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) {
        self.get_mut(name).grad.add_assign(grad);
    }

    /// Total number of trainable scalar coefficients.
    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }
}

/// RMSProp hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epsilon: f64,
    /// Decay of the mean-square accumulator.
    pub rho: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 5e-5,
            momentum: 0.9,
            epsilon: 1e-6,
            rho: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::validation("rho must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One RMSProp-with-momentum step over every trainable parameter:
/// s <- rho*s + (1-rho)*g^2; v <- momentum*v + lr*g/sqrt(s+eps); w <- w - v.
pub fn rmsprop_step(store: &mut ParameterStore, cfg: &OptimizerConfig) {
    for p in store.params.values_mut() {
        if !p.trainable {
            continue;
        }
        let g = p.grad.data();
        let s = p.ms.data_mut();
        for (si, gi) in s.iter_mut().zip(g.iter()) {
            *si = cfg.rho * *si + (1.0 - cfg.rho) * gi * gi;
        }
        let s = p.ms.data();
        let v = p.vel.data_mut();
        for ((vi, gi), si) in v.iter_mut().zip(g.iter()).zip(s.iter()) {
            *vi = cfg.momentum * *vi + cfg.learning_rate * gi / (si + cfg.epsilon).sqrt();
        }
        let v = p.vel.data();
        for (wi, vi) in p.value.data_mut().iter_mut().zip(v.iter()) {
            *wi -= vi;
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DPNN";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    params: Vec<ManifestEntry>,
}

/// Write every parameter value (trainable and buffer alike): magic,
/// version, length-prefixed JSON manifest of names and shapes, then the
/// arrays as row-major little-endian f64 in manifest order.
pub fn save_checkpoint<W: Write>(mut w: W, store: &ParameterStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let manifest = CheckpointManifest {
        params: store
            .params
            .iter()
            .map(|(name, p)| ManifestEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::validation(e.to_string()))?;
    w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for p in store.params.values() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint into a fresh store, verifying declared shapes against
/// the data actually present.
pub fn load_checkpoint<R: Read>(mut r: R) -> Result<ParameterStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::validation("not a checkpoint file (bad magic)"));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(Error::validation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut manifest_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::validation(format!("bad checkpoint manifest: {e}")))?;

    let mut store = ParameterStore::new();
    for entry in &manifest.params {
        let volume: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; volume];
        let mut buf = [0u8; 8];
        for slot in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| {
                Error::validation(format!(
                    "checkpoint truncated while reading {} {:?}",
                    entry.name, entry.shape
                ))
            })?;
            *slot = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::from_vec(&entry.shape, data)?;
        if entry.trainable {
            store.insert(&entry.name, tensor);
        } else {
            store.insert_buffer(&entry.name, tensor);
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::validation("trailing bytes after checkpoint data"));
    }
    Ok(store)
}
