//! Named parameter storage shared across graphs.
//!
//! A `ParamStore` owns the trainable tensors and one gradient accumulator
//! per parameter. Graphs are built against a specific store and check its
//! identity before touching gradients, so a tape can never silently write
//! into the wrong model. Registration order is the canonical parameter
//! order everywhere (optimizer sweeps, checkpoints, flattened gradients).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl ParamEntry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }
}

#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.shape().len()).sum()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Entries in registration order.
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.grad.shape() != delta.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} vs {}", entry.grad.shape(), delta.shape()),
            ));
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// L2 norm of all gradients taken together.
    pub fn grad_global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for e in &self.entries {
            for g in e.grad.data() {
                sq += g * g;
            }
        }
        sq.sqrt()
    }

    pub fn grads_finite(&self) -> Result<()> {
        for e in &self.entries {
            if !e.grad.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: e.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// All gradients flattened in registration order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.grad.data());
        }
        out
    }

    /// All values flattened in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Overwrite values from a flat slice in registration order.
    pub fn load_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::shape(
                "load_flat_values",
                format!("expected {} scalars, got {}", self.n_scalars(), flat.len()),
            ));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.shape().len();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Nudge one scalar inside one parameter, for finite differencing.
    pub fn perturb(&mut self, id: ParamId, flat_index: usize, delta: f64) -> Result<()> {
        let entry = &mut self.entries[id.0];
        let data = entry.value.data_mut();
        if flat_index >= data.len() {
            return Err(Error::IndexOutOfRange {
                what: "parameter scalar",
                index: flat_index,
                size: data.len(),
            });
        }
        data[flat_index] += delta;
        Ok(())
    }

    /// Named copies of every value, in registration order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Restore values from a snapshot. Names and shapes must match the
    /// registered parameters exactly; extra or missing names are errors.
    pub fn restore(&mut self, snapshot: &[(String, Tensor)]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "snapshot has {} parameters, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (name, value) in snapshot {
            let id = self.id_of(name)?;
            let entry = &mut self.entries[id.0];
            if entry.value.shape() != value.shape() {
                return Err(Error::shape(
                    "restore",
                    format!(
                        "parameter `{}`: {} vs {}",
                        name,
                        entry.value.shape(),
                        value.shape()
                    ),
                ));
            }
            entry.value = value.clone();
        }
        Ok(())
    }

    /// Fill every parameter from `init`, called once per scalar in
    /// registration order.
    pub fn init_with(&mut self, mut init: impl FnMut(&str, Shape) -> Tensor) -> Result<()> {
        for i in 0..self.entries.len() {
            let (name, shape) = {
                let e = &self.entries[i];
                (e.name.clone(), e.value.shape())
            };
            let t = init(&name, shape);
            if t.shape() != shape {
                return Err(Error::shape(
                    "init_with",
                    format!("parameter `{name}`: {} vs {}", shape, t.shape()),
                ));
            }
            self.entries[i].value = t;
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}
