use rand::Rng;

use super::graph::Gradients;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub frozen: bool,
}

/// Flat, ordered registry of a model's parameters. Names are dotted paths
/// whose leading segments name the owning layer (`head.dense0.w`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a tensor that is never updated by the optimizer (normalization
    /// statistics, EMA codebooks).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].frozen = true;
        id
    }

    /// Uniform(-bound, bound) initialization.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(rng.random_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// Adds the gradients of a finished backward pass into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for (pid, g) in grads.param_grads() {
            let p = &mut self.params[pid.0];
            if !p.frozen {
                p.grad.add_assign(g);
            }
        }
    }

    fn layer_matches(param: &str, layer: &str) -> bool {
        param == layer || (param.starts_with(layer) && param.as_bytes().get(layer.len()) == Some(&b'.'))
    }

    /// Freezes every parameter except those belonging to the named layers.
    pub fn freeze_all_except(&mut self, head_layers: &[&str]) -> Result<()> {
        if head_layers.is_empty() {
            return Err(Error::Name("at least one head layer must be named".into()));
        }
        for layer in head_layers {
            if !self.params.iter().any(|p| Self::layer_matches(&p.name, layer)) {
                return Err(Error::Name((*layer).to_string()));
            }
        }
        for p in &mut self.params {
            p.frozen = !head_layers.iter().any(|l| Self::layer_matches(&p.name, l));
        }
        Ok(())
    }

    pub fn set_frozen_all(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn set_frozen_prefix(&mut self, layer: &str, frozen: bool) {
        for p in &mut self.params {
            if Self::layer_matches(&p.name, layer) {
                p.frozen = frozen;
            }
        }
    }

    /// Snapshot of all values, for best-checkpoint tracking.
    pub fn values(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<S>]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }
}
