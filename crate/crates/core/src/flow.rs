//! Fourier flows: per-class normalizing flows over the spectral vector of
//! each lead, built from standardization and alternating affine couplings.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{frequency_transform, inverse_frequency_transform, SpectralVector};
use crate::error::{Error, IoContext, Result};
use crate::nn::{Adam, Checkpoint, Dense, Graph, ParamStore, Real, Tensor, Var};
use crate::record::{Dataset, RhythmClass, Signal};
use crate::rng;
use crate::synth::{normalized_rows, training_shape, Generator, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub couplings: usize,
    pub hidden: usize,
    /// Bound of the soft log-scale clamp `c·tanh(s/c)`.
    pub clamp: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    /// Share of rows held out to pick the returned parameters.
    pub validation_fraction: f64,
    pub n_classes: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            couplings: 6,
            hidden: 64,
            clamp: 5.0,
            lr: 1e-4,
            batch_size: 32,
            train_steps: 400,
            validation_fraction: 0.2,
            n_classes: RhythmClass::COUNT,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [("hidden", self.hidden), ("batch_size", self.batch_size), ("n_classes", self.n_classes)] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            bad.push(format!("clamp {} must be positive", self.clamp));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bad.push(format!("validation_fraction {} must be in [0, 1)", self.validation_fraction));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Affine coupling: cells with index parity `parity` are scaled and
/// shifted by a dense network of the other half.
#[derive(Debug, Clone)]
struct Coupling {
    parity: usize,
    l1: Dense,
    l2: Dense,
}

/// Even/odd half of [B, D] as [B, D/2].
fn half<S: Real>(g: &mut Graph<S>, x: Var, parity: usize) -> Result<Var> {
    let (b, d) = (g.shape(x)[0], g.shape(x)[1]);
    let r = g.reshape(x, &[b, d / 2, 2])?;
    let s = g.slice(r, 2, parity, 1)?;
    g.reshape(s, &[b, d / 2])
}

fn interleave<S: Real>(g: &mut Graph<S>, even: Var, odd: Var) -> Result<Var> {
    let (b, h) = (g.shape(even)[0], g.shape(even)[1]);
    let e = g.reshape(even, &[b, h, 1])?;
    let o = g.reshape(odd, &[b, h, 1])?;
    let c = g.concat(&[e, o], 2)?;
    g.reshape(c, &[b, 2 * h])
}

impl Coupling {
    /// Clamped log-scales and shifts from the conditioning half.
    fn transfer<S: Real>(&self, g: &mut Graph<S>, cond: Var, clamp: f64) -> Result<(Var, Var)> {
        let h = self.l1.forward(g, cond)?;
        let h = g.tanh(h);
        let out = self.l2.forward(g, h)?;
        let n = g.shape(cond)[1];
        let raw = g.slice(out, 1, 0, n)?;
        let shift = g.slice(out, 1, n, n)?;
        let s = g.scale(raw, 1.0 / clamp);
        let s = g.tanh(s);
        Ok((g.scale(s, clamp), shift))
    }

    /// Returns `(y, s)` where `s` [B, D/2] are the log-scales.
    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, clamp: f64) -> Result<(Var, Var)> {
        let moved = half(g, x, self.parity)?;
        let cond = half(g, x, 1 - self.parity)?;
        let (s, t) = self.transfer(g, cond, clamp)?;
        let e = g.exp(s)?;
        let y = g.mul(moved, e)?;
        let y = g.add(y, t)?;
        let out = if self.parity == 0 { interleave(g, y, cond)? } else { interleave(g, cond, y)? };
        Ok((out, s))
    }

    fn inverse<S: Real>(&self, g: &mut Graph<S>, y: Var, clamp: f64) -> Result<Var> {
        let moved = half(g, y, self.parity)?;
        let cond = half(g, y, 1 - self.parity)?;
        let (s, t) = self.transfer(g, cond, clamp)?;
        let neg = g.scale(s, -1.0);
        let e = g.exp(neg)?;
        let x = g.sub(moved, t)?;
        let x = g.mul(x, e)?;
        if self.parity == 0 {
            interleave(g, x, cond)
        } else {
            interleave(g, cond, x)
        }
    }
}

/// Standardization followed by `couplings` affine coupling layers on
/// vectors of dimension `dim`, with a standard-normal base.
#[derive(Debug, Clone)]
pub struct FlowStack<S: Real = f32> {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub clamp: f64,
    pub store: ParamStore<S>,
    couplings: Vec<Coupling>,
}

fn ln_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

impl<S: Real> FlowStack<S> {
    /// Identity flow: unit standardization and zero-initialized transfer
    /// outputs.
    pub fn new(dim: usize, couplings: usize, hidden: usize, clamp: f64, seed: u64) -> Result<Self> {
        if dim == 0 || (couplings > 0 && dim % 2 != 0) {
            return Err(Error::InvalidArgument(format!("coupling flows need an even dimension, got {dim}")));
        }
        let mut store = ParamStore::new();
        let mut r = rng::child(seed, 0xF10);
        let couplings = (0..couplings)
            .map(|i| {
                let l1 = Dense::new(&mut store, &format!("coupling{i}.l1"), dim / 2, hidden, &mut r);
                let l2 = Dense::new(&mut store, &format!("coupling{i}.l2"), hidden, dim, &mut r);
                for id in [l2.w, l2.b] {
                    store.get_mut(id).value.fill(S::zero());
                }
                Coupling { parity: i % 2, l1, l2 }
            })
            .collect();
        Ok(Self {
            dim,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            clamp,
            store,
            couplings,
        })
    }

    pub fn couplings(&self) -> usize {
        self.couplings.len()
    }

    /// Per-coordinate mean and standard deviation of `rows`; coordinates
    /// with no spread keep unit scale.
    pub fn fit_standardization(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::SampleSize { needed: 1, got: 0 });
        }
        let n = rows.len() as f64;
        for j in 0..self.dim {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            self.mean[j] = m;
            self.std[j] = if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    fn check_rows(&self, rows: &[Vec<f64>]) -> Result<()> {
        match rows.iter().find(|r| r.len() != self.dim) {
            Some(r) => Err(Error::shape("flow input", [self.dim], [r.len()])),
            None => Ok(()),
        }
    }

    fn standardize(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter()
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]))
            .collect()
    }

    fn std_log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Graph of all couplings on standardized input [B, D]; returns the
    /// base variable and each layer's log-scales.
    fn forward_graph(&self, g: &mut Graph<S>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut scales = Vec::with_capacity(self.couplings.len());
        for c in &self.couplings {
            let (y, s) = c.forward(g, h, self.clamp)?;
            h = y;
            scales.push(s);
        }
        Ok((h, scales))
    }

    /// Base variables and total `log |det J|` of each row.
    pub fn forward(&self, rows: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.check_rows(rows)?;
        if rows.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let b = rows.len();
        let mut g = Graph::new(&self.store, false, 0);
        let mut h = g.input(Tensor::from_f64(&[b, self.dim], &self.standardize(rows))?);
        if !g.value(h).is_finite() {
            return Err(Error::Numeric("non-finite value after standardization".into()));
        }
        let mut log_det = vec![self.std_log_det(); b];
        for (i, c) in self.couplings.iter().enumerate() {
            let (y, s) = c.forward(&mut g, h, self.clamp)?;
            if !g.value(y).is_finite() {
                return Err(Error::Numeric(format!("non-finite value after coupling layer {i}")));
            }
            for (ld, row) in log_det.iter_mut().zip(g.value(s).to_f64().chunks(self.dim / 2)) {
                *ld += row.iter().sum::<f64>();
            }
            h = y;
        }
        let z = g.value(h).to_f64().chunks(self.dim).map(<[f64]>::to_vec).collect();
        Ok((z, log_det))
    }

    /// Exact log-density of each row under the flow.
    pub fn log_likelihood(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (z, ld) = self.forward(rows)?;
        let ll: Vec<f64> = z.iter().zip(ld).map(|(z, ld)| ln_normal(z) + ld).collect();
        if ll.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite log-likelihood at the base density".into()));
        }
        Ok(ll)
    }

    /// Maps base variables back to data space.
    pub fn inverse(&self, z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_rows(z)?;
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let b = z.len();
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let mut g = Graph::new(&self.store, false, 0);
        let mut h = g.input(Tensor::from_f64(&[b, self.dim], &flat)?);
        for c in self.couplings.iter().rev() {
            h = c.inverse(&mut g, h, self.clamp)?;
        }
        let x = g.value(h).to_f64();
        Ok(x.chunks(self.dim)
            .map(|r| r.iter().enumerate().map(|(j, v)| v * self.std[j] + self.mean[j]).collect())
            .collect())
    }

    /// One coupling layer on a single standardized vector; returns the
    /// output and its `log |det J|`.
    pub fn coupling_forward(&self, layer: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let c = self.couplings.get(layer).ok_or(Error::Index {
            index: layer,
            bound: self.couplings.len(),
        })?;
        let mut g = Graph::new(&self.store, false, 0);
        let xv = g.input(Tensor::from_f64(&[1, x.len()], x)?);
        let (y, s) = c.forward(&mut g, xv, self.clamp)?;
        Ok((g.value(y).to_f64(), g.value(s).to_f64().iter().sum()))
    }

    pub fn coupling_inverse(&self, layer: usize, y: &[f64]) -> Result<Vec<f64>> {
        let c = self.couplings.get(layer).ok_or(Error::Index {
            index: layer,
            bound: self.couplings.len(),
        })?;
        let mut g = Graph::new(&self.store, false, 0);
        let yv = g.input(Tensor::from_f64(&[1, y.len()], y)?);
        let x = c.inverse(&mut g, yv, self.clamp)?;
        Ok(g.value(x).to_f64())
    }

    /// Mean negative log-likelihood per dimension of a batch, up to the
    /// constant standardization and base-normalizer terms.
    pub fn nll_graph(&self, g: &mut Graph<S>, rows: &[Vec<f64>]) -> Result<Var> {
        self.check_rows(rows)?;
        let b = rows.len();
        let x = g.input(Tensor::from_f64(&[b, self.dim], &self.standardize(rows))?);
        let (z, scales) = self.forward_graph(g, x)?;
        let zz = g.mul(z, z)?;
        let zz = g.sum_all(zz);
        let denom = (b * self.dim) as f64;
        let mut loss = g.scale(zz, 0.5 / denom);
        for s in scales {
            let ld = g.sum_all(s);
            let ld = g.scale(ld, -1.0 / denom);
            loss = g.add(loss, ld)?;
        }
        Ok(loss)
    }

    /// Draws `n` samples from stream `r`.
    pub fn sample(&self, n: usize, r: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let z: Vec<Vec<f64>> = (0..n).map(|_| rng::normals(r, self.dim)).collect();
        self.inverse(&z)
    }
}

/// Per-step training losses, validation mean log-likelihood per dimension
/// (entry 0 is the untrained stack) and its best value so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowLog {
    pub losses: Vec<f64>,
    pub validation: Vec<f64>,
    pub best: Vec<f64>,
}

/// Maximum-likelihood training by Adam. A `validation_fraction` share of
/// the rows is held out and the parameters with the best held-out
/// likelihood are kept; without a usable split the final parameters are
/// kept and `best` tracks the training objective. Standardization is fitted
/// on the training rows. On a non-finite loss the stack is restored to its
/// last finite state and a NumericError is returned.
pub fn train_flow_stack<S: Real>(stack: &mut FlowStack<S>, rows: &[Vec<f64>], config: &FlowConfig, seed: u64) -> Result<FlowLog> {
    let mut r = rng::child(seed, 0xF1A);
    let order = rng::permutation(&mut r, rows.len());
    let n_val = (rows.len() as f64 * config.validation_fraction).floor() as usize;
    let n_val = if n_val >= rows.len() { 0 } else { n_val };
    let val: Vec<Vec<f64>> = order[..n_val].iter().map(|&i| rows[i].clone()).collect();
    let train: Vec<Vec<f64>> = if n_val == 0 {
        rows.to_vec()
    } else {
        order[n_val..].iter().map(|&i| rows[i].clone()).collect()
    };
    stack.fit_standardization(&train)?;
    let dim = stack.dim as f64;
    let score = |stack: &FlowStack<S>| -> Result<f64> {
        let ll = stack.log_likelihood(&val)?;
        Ok(ll.iter().sum::<f64>() / (ll.len() as f64 * dim))
    };
    let mut adam = Adam::new(config.lr);
    let mut log = FlowLog::default();
    let mut best = f64::NEG_INFINITY;
    let mut kept = None;
    if n_val > 0 {
        best = score(stack)?;
        log.validation.push(best);
        kept = Some(stack.store.values());
    }
    for step in 0..config.train_steps {
        let batch: Vec<Vec<f64>> = (0..config.batch_size.min(train.len()))
            .map(|_| train[r.random_range(0..train.len())].clone())
            .collect();
        let good = stack.store.values();
        let (value, grads) = {
            let mut g = Graph::new(&stack.store, true, 0);
            let loss = stack.nll_graph(&mut g, &batch)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("flow loss {value} at step {step}; parameters restored to step {}", step.saturating_sub(1))));
            }
            (value, g.backward(loss))
        };
        stack.store.accumulate(&grads);
        if let Err(e) = adam.step(&mut stack.store) {
            stack.store.restore(&good);
            return Err(e);
        }
        if stack.store.iter().any(|p| !p.value.is_finite()) {
            stack.store.restore(&good);
            return Err(Error::Numeric(format!("non-finite flow parameters after step {step}; restored")));
        }
        log.losses.push(value);
        if n_val > 0 {
            let v = match score(stack) {
                Ok(v) => v,
                Err(_) => f64::NEG_INFINITY,
            };
            log.validation.push(v);
            if v > best {
                best = v;
                kept = Some(stack.store.values());
            }
        } else {
            best = best.max(-value);
        }
        log.best.push(best);
    }
    if let Some(values) = kept {
        stack.store.restore(&values);
    }
    Ok(log)
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: FlowConfig,
    leads: usize,
    length: usize,
    normalizer: Normalizer,
    classes: Vec<usize>,
    standardization: Vec<(Vec<f64>, Vec<f64>)>,
}

const DESCRIPTOR_PREFIX: &str = "ecgsyn.flow/1 ";

/// One flow per class over the spectral vectors of single leads; leads are
/// modelled independently with shared parameters.
#[derive(Debug, Clone)]
pub struct FourierFlow<S: Real = f32> {
    pub config: FlowConfig,
    pub leads: usize,
    pub length: usize,
    pub normalizer: Normalizer,
    pub seed: u64,
    flows: Vec<Option<FlowStack<S>>>,
}

impl<S: Real> FourierFlow<S> {
    pub fn new(config: &FlowConfig, leads: usize, length: usize, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if normalizer.leads() != leads {
            return Err(Error::shape("normalizer", [leads], [normalizer.leads()]));
        }
        if length < 2 {
            return Err(Error::shape("flow input length", [2], [length]));
        }
        Ok(Self {
            config: config.clone(),
            leads,
            length,
            normalizer,
            seed,
            flows: vec![None; config.n_classes],
        })
    }

    /// Spectral dimension: the length rounded up to even.
    pub fn dim(&self) -> usize {
        self.length + self.length % 2
    }

    pub fn flow(&self, class: RhythmClass) -> Option<&FlowStack<S>> {
        self.flows.get(class.id()).and_then(Option::as_ref)
    }

    fn new_stack(&self, class: usize) -> Result<FlowStack<S>> {
        FlowStack::new(self.dim(), self.config.couplings, self.config.hidden, self.config.clamp, rng::mix(self.seed, class as u64))
    }

    /// Spectral vectors of each lead of a normalized lead-major row.
    pub fn spectral_rows(&self, row: &[f64]) -> Result<Vec<Vec<f64>>> {
        if row.len() != self.leads * self.length {
            return Err(Error::shape("flow record", [self.leads * self.length], [row.len()]));
        }
        row.chunks(self.length).map(|lead| Ok(frequency_transform(lead, self.dim())?.to_flat())).collect()
    }

    /// Trains the flow of `class` on normalized rows.
    pub fn train_class(&mut self, class: usize, rows: &[&[f64]], seed: u64) -> Result<FlowLog> {
        if class >= self.config.n_classes {
            return Err(Error::Index {
                index: class,
                bound: self.config.n_classes,
            });
        }
        let mut spectral = Vec::with_capacity(rows.len() * self.leads);
        for row in rows {
            spectral.extend(self.spectral_rows(row)?);
        }
        let mut stack = self.new_stack(class)?;
        let log = train_flow_stack(&mut stack, &spectral, &self.config, seed)?;
        self.flows[class] = Some(stack);
        Ok(log)
    }

    /// Log-density of a signal under the flow of `class`, in the normalized
    /// spectral coordinates (the constant Jacobians of the normalizer and
    /// the frequency transform are left out).
    pub fn log_likelihood(&self, sig: &Signal, class: RhythmClass) -> Result<f64> {
        let flow = self.flow(class).ok_or_else(|| Error::State(format!("no flow trained for class {}", class.code())))?;
        let rows = self.spectral_rows(&self.normalizer.normalize(sig)?)?;
        Ok(flow.log_likelihood(&rows)?.iter().sum())
    }

    pub fn sample_normalized(&self, class: RhythmClass, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let flow = self.flow(class).ok_or_else(|| Error::State(format!("no flow trained for class {}", class.code())))?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng::child(seed, i as u64);
            let mut row = Vec::with_capacity(self.leads * self.length);
            for spec in flow.sample(self.leads, &mut r)? {
                row.extend(inverse_frequency_transform(&SpectralVector::from_flat(&spec, self.length)?));
            }
            out.push(row);
        }
        Ok(out)
    }

    fn merged_store(&self) -> (ParamStore<S>, Vec<usize>) {
        let mut store = ParamStore::new();
        let mut classes = Vec::new();
        for (c, f) in self.flows.iter().enumerate() {
            if let Some(f) = f {
                classes.push(c);
                for p in f.store.iter() {
                    store.add(format!("class{c}.{}", p.name), p.value.clone());
                }
            }
        }
        (store, classes)
    }

    pub fn descriptor(&self) -> String {
        let (_, classes) = self.merged_store();
        let d = Descriptor {
            config: self.config.clone(),
            leads: self.leads,
            length: self.length,
            normalizer: self.normalizer.clone(),
            standardization: classes
                .iter()
                .map(|&c| {
                    let f = self.flows[c].as_ref().expect("present");
                    (f.mean.clone(), f.std.clone())
                })
                .collect(),
            classes,
        };
        format!("{DESCRIPTOR_PREFIX}{}", serde_json::to_string(&d).expect("serializable"))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let (store, _) = self.merged_store();
        Checkpoint::from_store(&store, &self.descriptor(), self.seed).to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::<S>::from_bytes(bytes)?;
        let json = ck
            .descriptor
            .strip_prefix(DESCRIPTOR_PREFIX)
            .ok_or_else(|| Error::Version(format!("not a flow checkpoint: {}", ck.descriptor)))?;
        let d: Descriptor = serde_json::from_str(json).map_err(|e| Error::Version(format!("bad descriptor: {e}")))?;
        let mut model = Self::new(&d.config, d.leads, d.length, d.normalizer, ck.seed)?;
        if d.classes.len() != d.standardization.len() {
            return Err(Error::Version("flow descriptor class/standardization mismatch".into()));
        }
        for (&c, (mean, std)) in d.classes.iter().zip(d.standardization) {
            if c >= model.config.n_classes || mean.len() != model.dim() || std.len() != model.dim() {
                return Err(Error::Version(format!("bad flow entry for class {c}")));
            }
            let mut stack = model.new_stack(c)?;
            stack.mean = mean;
            stack.std = std;
            model.flows[c] = Some(stack);
        }
        let (mut merged, _) = model.merged_store();
        let descriptor = model.descriptor();
        ck.apply(&mut merged, &descriptor)?;
        let mut values = merged.iter().map(|p| p.value.clone());
        for f in model.flows.iter_mut().flatten() {
            for p in f.store.iter_mut() {
                p.value = values.next().expect("same layout");
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes)
    }
}

impl<S: Real> Generator for FourierFlow<S> {
    fn name(&self) -> &str {
        "fourier-flow"
    }

    fn leads(&self) -> usize {
        self.leads
    }

    fn length(&self) -> usize {
        self.length
    }

    fn sample(&self, label: RhythmClass, n: usize, seed: u64) -> Result<Vec<Signal>> {
        let rows = self.sample_normalized(label, n, seed)?;
        rows.iter().map(|r| self.normalizer.denormalize(r, self.length)).collect()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.checkpoint_bytes()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainLog {
    pub per_class: Vec<(usize, FlowLog)>,
    pub wall_time_s: f64,
}

/// One flow per class present in `ds`.
pub fn train_flow(ds: &Dataset, config: &FlowConfig, seed: u64) -> Result<(FourierFlow<f32>, FlowTrainLog)> {
    let start = Instant::now();
    let (leads, length) = training_shape(ds)?;
    let normalizer = Normalizer::fit(ds)?;
    let (rows, labels) = normalized_rows(ds, &normalizer)?;
    let mut model: FourierFlow<f32> = FourierFlow::new(config, leads, length, normalizer, seed)?;
    let mut log = FlowTrainLog::default();
    for class in 0..config.n_classes {
        let members: Vec<&[f64]> = rows.iter().zip(&labels).filter(|(_, &l)| l == class).map(|(r, _)| r.as_slice()).collect();
        if members.is_empty() {
            continue;
        }
        let l = model.train_class(class, &members, rng::mix(seed, class as u64))?;
        log.per_class.push((class, l));
    }
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok((model, log))
}
