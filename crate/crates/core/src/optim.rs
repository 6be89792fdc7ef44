//! Parameter storage and the AdamW update.
//!
//! All trainable state lives in a [`ParamStore`]: a name-indexed, ordered
//! collection of tensors. Graphs read parameters from the store and write
//! gradients back through [`ParamStore::accumulate_grad`]; the optimizer
//! then consumes those gradients in one place. Ordering is insertion
//! order, which fixes both reduction order and checkpoint layout.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Present once any graph has contributed; cleared by `zero_grads`.
    pub grad: Option<Vec<f32>>,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names are unique; registering everything up
    /// front (before any optimizer exists) is the expected lifecycle.
    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let idx = self.params.len();
        self.by_name.insert(name.to_string(), idx);
        self.params.push(Parameter { name: name.to_string(), tensor, grad: None, trainable });
        idx
    }

    /// Index of a registered parameter. Unknown names are wiring bugs.
    pub fn index_of(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.params[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].tensor
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.params[idx].trainable
    }

    pub fn grad(&self, idx: usize) -> Option<&[f32]> {
        self.params[idx].grad.as_deref()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    /// Elementwise-add a gradient contribution. Callers control the order
    /// of these calls, so summation is reproducible bit for bit.
    pub fn accumulate_grad(&mut self, idx: usize, g: &[f32]) {
        let p = &mut self.params[idx];
        assert_eq!(g.len(), p.tensor.len(), "gradient size mismatch for `{}`", p.name);
        match &mut p.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
    }

    /// Drop all accumulated gradients so the next step starts clean and a
    /// parameter that no graph touched is detectable again.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }
}

/// Decoupled-weight-decay Adam. First/second moments are kept per
/// parameter in store order; `step` is 1-based after the first update so
/// bias correction matches the usual formulation.
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        let m = store.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let v = store.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        AdamW { beta1, beta2, eps, weight_decay, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, idx: usize) -> (&[f32], &[f32]) {
        (&self.m[idx], &self.v[idx])
    }

    pub fn moments_mut(&mut self, idx: usize) -> (&mut [f32], &mut [f32]) {
        (&mut self.m[idx], &mut self.v[idx])
    }

    /// Apply one update at learning rate `lr`. Every trainable parameter
    /// must have received a gradient; a missing one means a graph was
    /// wired without it, which silently freezes training if ignored.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different store");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            if !store.is_trainable(idx) {
                continue;
            }
            let name = store.name(idx).to_string();
            let g = match store.grad(idx) {
                Some(g) => g.to_vec(),
                None => return Err(CoreError::MissingGrad(name)),
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = &mut store.tensor_mut(idx).data;
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}
