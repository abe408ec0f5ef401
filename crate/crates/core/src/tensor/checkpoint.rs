//! Parameter checkpoints: a JSON manifest naming every stored array, plus a
//! sibling `.bin` blob holding the values as little-endian `f64` in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{numel, AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

pub const FORMAT: &str = "genforge-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerScalars {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Free-form description of what the arrays belong to.
    pub header: serde_json::Value,
    pub entries: Vec<Entry>,
    pub optimizers: BTreeMap<String, OptimizerScalars>,
    pub total_values: usize,
}

/// In-memory checkpoint being assembled or read back.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    manifest: Manifest,
    values: Vec<f64>,
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            manifest: Manifest {
                format: FORMAT.into(),
                header,
                entries: Vec::new(),
                optimizers: BTreeMap::new(),
                total_values: 0,
            },
            values: Vec::new(),
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn header(&self) -> &serde_json::Value {
        &self.manifest.header
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], data: &[T]) -> Result<()> {
        let name = name.into();
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!("{name}: {} values for shape {shape:?}", data.len())));
        }
        if self.manifest.entries.iter().any(|e| e.name == name) {
            return Err(Error::Conflict(format!("duplicate checkpoint entry {name}")));
        }
        self.manifest.entries.push(Entry { name, shape: shape.to_vec(), offset: self.values.len() });
        self.values.extend(data.iter().map(|v| v.as_f64()));
        self.manifest.total_values = self.values.len();
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push(name, t.shape(), t.data())
    }

    /// Stores an optimizer's scalars and moments under `group`.
    pub fn push_adam<T: Scalar>(&mut self, group: &str, params: &[Tensor<T>], state: &AdamState<T>) -> Result<()> {
        for (i, ((p, m), v)) in params.iter().zip(&state.m).zip(&state.v).enumerate() {
            self.push(format!("{group}/adam_m/{i}"), p.shape(), m)?;
            self.push(format!("{group}/adam_v/{i}"), p.shape(), v)?;
        }
        let c = state.config;
        self.manifest.optimizers.insert(
            group.into(),
            OptimizerScalars { step: state.step, beta1: c.beta1, beta2: c.beta2, eps: c.eps },
        );
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name}")))
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let data: Vec<T> = self.values[e.offset..e.offset + numel(&e.shape)].iter().map(|&v| T::of(v)).collect();
        Tensor::new(&e.shape, data)
    }

    /// Reads back an optimizer stored with [`Checkpoint::push_adam`] for
    /// `params`.
    pub fn get_adam<T: Scalar>(&self, group: &str, params: &[Tensor<T>]) -> Result<AdamState<T>> {
        let s = self
            .manifest
            .optimizers
            .get(group)
            .ok_or_else(|| Error::Format(format!("checkpoint has no optimizer {group}")))?;
        let config = AdamConfig { beta1: s.beta1, beta2: s.beta2, eps: s.eps };
        let mut state = AdamState::new(params, config);
        state.step = s.step;
        for (i, p) in params.iter().enumerate() {
            let m = self.get::<T>(&format!("{group}/adam_m/{i}"))?;
            let v = self.get::<T>(&format!("{group}/adam_v/{i}"))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Format(format!("{group}: moment {i} shape differs from parameter")));
            }
            state.m[i] = m.into_data();
            state.v[i] = v.into_data();
        }
        Ok(state)
    }

    /// Writes `path` (manifest) and its `.bin` sibling.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(blob_path(path))?;
        f.write_all(&blob)?;
        f.sync_all()?;
        let mut f = fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(&self.manifest)?.as_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let blob = fs::read(blob_path(path))?;
        if blob.len() != manifest.total_values * 8 {
            return Err(Error::Format(format!(
                "blob holds {} bytes, manifest expects {} values",
                blob.len(),
                manifest.total_values
            )));
        }
        for e in &manifest.entries {
            if e.offset + numel(&e.shape) > manifest.total_values {
                return Err(Error::Format(format!("entry {} runs past the blob", e.name)));
            }
        }
        let values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { manifest, values })
    }
}
