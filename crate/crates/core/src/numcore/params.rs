use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use super::graph::Graph;
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors with gradient slots and Adam moments.
///
/// Names are unique and shapes never change after insertion. Iteration
/// order is insertion order, which is also the checkpoint order.
#[derive(Debug)]
pub struct ParameterSet {
    id: u64,
    slots: IndexMap<String, Slot>,
    step: u64,
}

impl Clone for ParameterSet {
    fn clone(&self) -> Self {
        ParameterSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            slots: self.slots.clone(),
            step: self.step,
        }
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam hyperparameters. Defaults are the usual (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            slots: IndexMap::new(),
            step: 0,
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let n = value.numel();
        self.slots.insert(
            name,
            Slot {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    /// Inserts a parameter drawn from U(-bound, bound).
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut RngStream,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.get_index_of(name)
    }

    pub(crate) fn value_at(&self, ix: usize) -> &Tensor {
        &self.slots[ix].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.slots.get(name)?.grad.as_deref()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// Overwrites a parameter value; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::dimension(
                format!("set {name}"),
                slot.value.shape(),
                value.shape(),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    /// Adds the gradients of every parameter bound on `graph` into the
    /// gradient slots.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        let mut updates: Vec<(usize, Vec<f64>)> = graph.bound_grads(self).map(|(ix, g)| (ix, g.to_vec())).collect();
        updates.sort_by_key(|(ix, _)| *ix);
        for (ix, g) in updates {
            let slot = &mut self.slots[ix];
            match &mut slot.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => slot.grad = Some(g),
            }
        }
    }

    /// Sets every gradient slot to zero.
    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            let n = slot.value.numel();
            slot.grad = Some(vec![0.0; n]);
        }
    }

    /// Bias-corrected Adam update. Gradients are left in place.
    pub fn adam_step(&mut self, learning_rate: f64, cfg: AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.slots.iter().find(|(_, s)| s.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let grad = slot.grad.as_ref().expect("checked above");
            let data = slot.value.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = slot.m[i] / c1;
                let v_hat = slot.v[i] / c2;
                data[i] -= learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::numeric("adam_step"));
            }
        }
        Ok(())
    }
}
