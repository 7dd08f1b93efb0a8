//! Named model tensors with provenance and freeze flags.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a tensor's initial value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Copied or derived from the 2D checkpoint.
    Pretrained,
    /// Freshly added by the 3D adaptation.
    New,
    /// Replaces a pretrained module with a new 3D one (the bottleneck).
    Rebuilt,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub origin: Origin,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, origin: Origin, frozen: bool) {
        self.map.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                origin,
                frozen,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing tensor `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("missing tensor `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}`: shape {:?} cannot take {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.map
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::Parameter(format!("missing tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.map.remove(name)
    }

    /// Removes every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over the little-endian bytes of each tensor.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.map
            .iter()
            .map(|(k, p)| (k.clone(), tensor_hash(&p.value)))
            .collect()
    }
}

pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes());
    hex::encode(h.finalize())
}

/// Uniform in `±1/√fan_in`.
pub(crate) fn fan_in_uniform<R: rand::Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}
