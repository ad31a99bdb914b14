//! Named parameter storage shared by the flow model and the optimizer.
//!
//! Parameters live outside any tape as plain [`Tensor`] values and are
//! leased onto a fresh tape once per step. [`Leases`] guarantees one leaf
//! per parameter per tape so gradient write-back is a single pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of one named tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// All tensors of one model: trainable weights (`requires_grad`) plus
/// batch-norm running statistics (fixed by the optimizer, updated by EMA).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub(crate) entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.tensor(*id).requires_grad).collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Total number of trainable scalar values.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad)
            .map(|e| e.tensor.data.len())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

/// One leaf per parameter per tape.
pub struct Leases {
    vars: Vec<Option<Var>>,
}

impl Leases {
    pub fn new(params: &ParamSet) -> Self {
        Self { vars: vec![None; params.len()] }
    }

    pub fn get(&mut self, tape: &mut Tape, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(params.tensor(id));
        self.vars[id.0] = Some(v);
        v
    }

    /// Accumulate tape gradients of every leased parameter into the set.
    pub fn write_grads(&self, tape: &Tape, params: &mut ParamSet) {
        for (idx, v) in self.vars.iter().enumerate() {
            if let Some(v) = v {
                tape.write_grad_into(*v, &mut params.entries[idx].tensor);
            }
        }
    }
}

/// Deferred exponential-moving-average update of one batch-norm layer's
/// running statistics, collected during a training-mode forward pass.
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub stats: BatchStats,
}

/// Apply collected running-statistics updates with the given momentum.
pub fn apply_bn_updates(params: &mut ParamSet, updates: Vec<BnUpdate>, momentum: f64) {
    for u in updates {
        let mean = params.tensor_mut(u.mean_id);
        for (m, b) in mean.data.iter_mut().zip(&u.stats.mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        let var = params.tensor_mut(u.var_id);
        for (v, b) in var.data.iter_mut().zip(&u.stats.var) {
            *v = (1.0 - momentum) * *v + momentum * b;
        }
    }
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub fn normal_init(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let numel: usize = shape.iter().product();
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..numel)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
        .collect();
    Tensor { shape, data, requires_grad: true, grad: None }
}

/// Restore parameter values by name from `(name, shape, values)` triples.
/// Every entry of the set must be present with a matching shape.
pub fn restore_values(params: &mut ParamSet, stored: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    if stored.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            stored.len(),
            params.len()
        )));
    }
    for (name, shape, values) in stored {
        let id = params
            .find(name)
            .ok_or_else(|| Error::Data(format!("checkpoint tensor {name:?} not in model")))?;
        let t = params.tensor_mut(id);
        if &t.shape != shape {
            return Err(Error::Data(format!(
                "checkpoint tensor {name:?} has shape {shape:?}, model expects {:?}",
                t.shape
            )));
        }
        t.data = values.clone();
        t.grad = None;
    }
    Ok(())
}
