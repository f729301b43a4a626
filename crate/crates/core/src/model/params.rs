//! Named, partitioned parameter storage.
//!
//! Tensors live in insertion order, which fixes the checkpoint payload
//! layout and the optimizer's state alignment. Each tensor belongs to a
//! partition: `Frozen` weights never receive gradients or optimizer updates,
//! and their bytes can be hashed before and after a training stage to prove
//! they were untouched.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Frozen,
    Trainable,
}

pub struct ParamStore<T: Real> {
    entries: Vec<(String, Partition, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, partition: Partition, mut tensor: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Model(format!("duplicate parameter {name:?}")));
        }
        tensor.set_requires_grad(partition == Partition::Trainable);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), partition, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].2)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].2),
            None => Err(Error::Model(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn partition_of(&self, name: &str) -> Result<Partition> {
        self.index
            .get(name)
            .map(|&i| self.entries[i].1)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name:?}")))
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("unknown parameter {name:?}")))
    }

    pub fn entry(&self, idx: usize) -> (&str, Partition, &Tensor<T>) {
        let (n, p, t) = &self.entries[idx];
        (n.as_str(), *p, t)
    }

    pub fn entry_mut(&mut self, idx: usize) -> (&str, Partition, &mut Tensor<T>) {
        let (n, p, t) = &mut self.entries[idx];
        (n.as_str(), *p, t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Partition, &Tensor<T>)> {
        self.entries.iter().map(|(n, p, t)| (n.as_str(), *p, t))
    }

    /// Trainable tensors in insertion order, for the optimizer.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .filter(|(_, p, _)| *p == Partition::Trainable)
            .map(|(_, _, t)| t)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for (_, p, t) in self.entries.iter_mut() {
            if *p == Partition::Trainable {
                t.zero_grad();
            }
        }
    }

    /// Moves every tensor into the frozen partition (dropping gradient
    /// buffers), e.g. when a pretrained backbone becomes the fixed base.
    pub fn freeze_all(&mut self) {
        for (_, p, t) in self.entries.iter_mut() {
            *p = Partition::Frozen;
            t.set_requires_grad(false);
        }
    }

    /// SHA-256 over name, shape, and little-endian f32 bytes of every tensor
    /// in the partition, in insertion order.
    pub fn partition_hash(&self, partition: Partition) -> String {
        let mut h = Sha256::new();
        for (name, p, t) in &self.entries {
            if *p != partition {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v.to_f64() as f32).to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    /// Element-preserving dtype conversion (used to run the same model at
    /// f64 for gradient checking).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p, t) in &self.entries {
            out.insert(name, *p, t.cast::<U>())
                .expect("names unique by construction");
        }
        out
    }
}
