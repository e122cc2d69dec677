use std::collections::BTreeMap;

use rand::Rng;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named collection of parameters plus the shared Adam step counter.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let (r, c) = value.shape();
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        id
    }

    /// Glorot-normal initialised weight matrix.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        self.add(name, Tensor::randn(rows, cols, std, rng))
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::full(rows, cols, v))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        kernels::add_into(&mut self.params[id.0].grad, g);
    }

    /// Add `scale * other`'s gradients into ours. Both sets must have the
    /// same layout.
    pub fn accumulate_from(&mut self, other: &ParamSet, scale: f64) {
        for (p, o) in self.params.iter_mut().zip(&other.params) {
            for (a, b) in p.grad.data_mut().iter_mut().zip(o.grad.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite values from `(name, tensor)` pairs. Every parameter must be
    /// present with a matching shape; extra names are ignored.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
        }
        Ok(())
    }

    /// Copy values (not gradients or moments) from a same-layout set.
    pub fn copy_values_from(&mut self, other: &ParamSet) {
        for (p, o) in self.params.iter_mut().zip(&other.params) {
            p.value = o.value.clone();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zero the
/// gradients. A non-finite gradient aborts before anything is modified.
pub fn adam_step(params: &mut ParamSet, cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut params.params {
        let g = p.grad.data();
        let m = p.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = p.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (p.m.data(), p.v.data());
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    params.zero_grad();
    Ok(())
}

/// Sum of squares of every parameter entry. The caller applies lambda.
pub fn l2_penalty(params: &ParamSet) -> f64 {
    params.iter().map(|p| p.value.sum_squares()).sum()
}
