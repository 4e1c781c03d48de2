use super::param::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every unfrozen parameter and zeroes all grads.
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if let Some(bad) = store.iter().find(|p| !p.frozen && !p.grad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", bad.name)));
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((w, &g), (mi, vi)) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g.f64();
                let mn = b1 * mi.f64() + (1.0 - b1) * g;
                let vn = b2 * vi.f64() + (1.0 - b2) * g * g;
                *mi = S::of(mn);
                *vi = S::of(vn);
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = S::of(w.f64() - update);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Patience-based early stopping on a validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn stale(&self) -> usize {
        self.stale
    }

    /// Records an epoch's loss; returns `true` when it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale = (self.stale + 1).min(self.patience);
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }
}
