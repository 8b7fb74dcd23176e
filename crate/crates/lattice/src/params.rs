//! Named parameter storage.
//!
//! All model state lives in one flat, sorted map from dotted names (e.g.
//! `enc.block0.attn.wq`) to f64 arrays. Sorted iteration makes gradient
//! application, checkpointing, and checksums deterministic, and name
//! prefixes define the freeze/train partitions used by the optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.values.insert(name.to_string(), value);
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.values.remove(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.values.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    /// Names matching any of the given dotted prefixes, sorted.
    pub fn names_with_prefix(&self, prefixes: &[&str]) -> Vec<String> {
        self.values
            .keys()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect()
    }

    /// SHA-256 over names, shapes, and little-endian f64 bytes, in sorted
    /// name order. Bitwise-sensitive: any single-bit parameter change moves
    /// the digest.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.values {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((value.ndim() as u64).to_le_bytes());
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in value.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Checksum restricted to names with any of the given prefixes.
    pub fn checksum_prefix(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.values {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for &x in value.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Raw bit-patterns of one parameter, for exact freeze assertions.
    pub fn bits(&self, name: &str) -> Result<Vec<u64>> {
        Ok(self.get(name)?.iter().map(|x| x.to_bits()).collect())
    }
}

/// A tape under construction plus the parameter store feeding it.
///
/// Each parameter is bound to at most one tape node per graph, so a batch
/// forward reuses one leaf per parameter and gradient accumulation across
/// samples happens inside the tape.
pub struct Binder<'s> {
    pub t: crate::graph::Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, crate::graph::NodeId>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            t: crate::graph::Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    /// Node for a named parameter, creating the leaf on first use.
    pub fn p(&mut self, name: &str) -> Result<crate::graph::NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = self.t.param(name, value);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Truncated-normal init: N(0, std²) resampled until within ±2 std.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}
