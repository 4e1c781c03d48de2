use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Conv1d, Dense, Graph, ParamStore, Real, Tensor, Var};
use crate::record::{EcgRecord, RhythmClass};
use crate::rng;

/// Hyperparameters of the residual CNN classifier and its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub n_conv_blocks: usize,
    pub n_kernels: usize,
    pub kernel_len: usize,
    pub n_neurons: usize,
    pub n_dense_layers: usize,
    pub lr: f64,
    pub dropout: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub n_classes: usize,
    /// Max-pool factor applied after each residual block (1 = none).
    pub pool: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl ClassifierConfig {
    /// Tuned configuration for PTB-XL.
    pub fn ptbxl() -> Self {
        Self {
            n_conv_blocks: 6,
            n_kernels: 32,
            kernel_len: 7,
            n_neurons: 256,
            n_dense_layers: 3,
            lr: 0.000354,
            dropout: 0.474333,
            patience: 10,
            min_delta: 1e-5,
            n_classes: RhythmClass::COUNT,
            pool: 1,
            batch_size: 32,
            max_epochs: 100,
        }
    }

    /// Tuned configuration for CHAPMAN.
    pub fn chapman() -> Self {
        Self {
            n_conv_blocks: 5,
            n_kernels: 16,
            lr: 0.000158,
            dropout: 0.377601,
            ..Self::ptbxl()
        }
    }

    /// Small configuration that trains in seconds on fixture data.
    pub fn desk() -> Self {
        Self {
            n_conv_blocks: 6,
            n_kernels: 8,
            kernel_len: 7,
            n_neurons: 32,
            n_dense_layers: 2,
            lr: 2e-3,
            dropout: 0.2,
            patience: 8,
            min_delta: 1e-5,
            n_classes: RhythmClass::COUNT,
            pool: 2,
            batch_size: 16,
            max_epochs: 40,
        }
    }

    /// Shrunk binary discriminator for the two-sample test.
    pub fn two_sample() -> Self {
        Self {
            n_conv_blocks: 2,
            n_kernels: 8,
            n_classes: 2,
            pool: 4,
            max_epochs: 20,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("n_conv_blocks", self.n_conv_blocks),
            ("n_kernels", self.n_kernels),
            ("kernel_len", self.kernel_len),
            ("n_neurons", self.n_neurons),
            ("n_dense_layers", self.n_dense_layers),
            ("n_classes", self.n_classes),
            ("pool", self.pool),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if !(self.min_delta >= 0.0) {
            bad.push("min_delta must be >= 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: ClassifierConfig,
    leads: usize,
    length: usize,
}

const DESCRIPTOR_PREFIX: &str = "ecgsyn.classifier/1 ";

/// Residual 1-D CNN: conv stem, residual conv blocks, flatten, dense head.
#[derive(Debug, Clone)]
pub struct Classifier<S: Real = f32> {
    pub config: ClassifierConfig,
    pub leads: usize,
    pub length: usize,
    pub store: ParamStore<S>,
    pub seed: u64,
    stem: Conv1d,
    blocks: Vec<Conv1d>,
    dense: Vec<Dense>,
    out: Dense,
    pools: Vec<usize>,
    flat: usize,
}

impl<S: Real> Classifier<S> {
    pub fn new(config: &ClassifierConfig, leads: usize, length: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if length < config.kernel_len || leads == 0 {
            return Err(Error::shape("classifier input", [leads.max(1), config.kernel_len], [leads, length]));
        }
        let mut store = ParamStore::new();
        let mut r = rng::child(seed, 0xC1A5);
        let k = config.n_kernels;
        let stem = Conv1d::new(&mut store, "stem", leads, k, config.kernel_len, &mut r);
        let mut blocks = Vec::new();
        let mut pools = Vec::new();
        let mut l = length;
        for i in 0..config.n_conv_blocks {
            blocks.push(Conv1d::new(&mut store, &format!("block{i}"), k, k, config.kernel_len, &mut r));
            let p = if config.pool > 1 && l / config.pool >= config.kernel_len { config.pool } else { 1 };
            pools.push(p);
            l /= p;
        }
        let flat = k * l;
        let mut dense = Vec::new();
        let mut width = flat;
        for i in 0..config.n_dense_layers {
            dense.push(Dense::new(&mut store, &format!("dense{i}"), width, config.n_neurons, &mut r));
            width = config.n_neurons;
        }
        let out = Dense::new(&mut store, "out", width, config.n_classes, &mut r);
        Ok(Self {
            config: config.clone(),
            leads,
            length,
            store,
            seed,
            stem,
            blocks,
            dense,
            out,
            pools,
            flat,
        })
    }

    pub fn descriptor(&self) -> String {
        let d = Descriptor {
            config: self.config.clone(),
            leads: self.leads,
            length: self.length,
        };
        format!("{DESCRIPTOR_PREFIX}{}", serde_json::to_string(&d).expect("serializable"))
    }

    /// Layers that stay trainable during transfer fine-tuning.
    pub fn head_layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.dense.len()).map(|i| format!("dense{i}")).collect();
        names.push("out".into());
        names
    }

    /// Flattened trunk width.
    pub fn feature_width(&self) -> usize {
        self.flat
    }

    /// Conv trunk on [B, leads, length], flattened to [B, features].
    pub fn trunk(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.leads || s[2] != self.length {
            return Err(Error::shape("classifier input", [0, self.leads, self.length], &s));
        }
        let mut h = self.stem.forward(g, x)?;
        for (block, &p) in self.blocks.iter().zip(&self.pools) {
            let c = block.forward(g, h)?;
            let r = g.add(c, h)?;
            h = g.relu(r);
            h = g.max_pool1d(h, p)?;
        }
        g.reshape(h, &[s[0], self.flat])
    }

    /// Dense head on [B, features], returning logits [B, n_classes].
    pub fn head(&self, g: &mut Graph<S>, features: Var) -> Result<Var> {
        let mut h = features;
        for d in &self.dense {
            h = d.forward(g, h)?;
            h = g.relu(h);
            h = g.dropout(h, self.config.dropout);
        }
        self.out.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let f = self.trunk(g, x)?;
        self.head(g, f)
    }

    /// Softmax class probabilities for each record.
    pub fn predict_scores(&self, records: &[&EcgRecord]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(self.config.batch_size.max(1) * 4) {
            let mut g = Graph::new(&self.store, false, 0);
            let x = g.input(stack_signals(chunk, self.leads, self.length)?);
            let logits = self.forward(&mut g, x)?;
            let p = g.softmax_last(logits);
            let k = self.config.n_classes;
            out.extend(g.value(p).data().chunks(k).map(|r| r.iter().map(|v| v.f64()).collect::<Vec<_>>()));
        }
        Ok(out)
    }

    /// Trunk features for every record, [N, features].
    pub fn features(&self, records: &[&EcgRecord]) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(records.len() * self.flat);
        for chunk in records.chunks(self.config.batch_size.max(1) * 4) {
            let mut g = Graph::new(&self.store, false, 0);
            let x = g.input(stack_signals(chunk, self.leads, self.length)?);
            let f = self.trunk(&mut g, x)?;
            data.extend_from_slice(g.value(f).data());
        }
        Tensor::new(&[records.len(), self.flat], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        Checkpoint::from_store(&self.store, &self.descriptor(), self.seed).to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::<S>::from_bytes(bytes)?;
        let json = ck
            .descriptor
            .strip_prefix(DESCRIPTOR_PREFIX)
            .ok_or_else(|| Error::Version(format!("not a classifier checkpoint: {}", ck.descriptor)))?;
        let d: Descriptor = serde_json::from_str(json).map_err(|e| Error::Version(format!("bad descriptor: {e}")))?;
        let mut model = Self::new(&d.config, d.leads, d.length, ck.seed)?;
        let descriptor = model.descriptor();
        ck.apply(&mut model.store, &descriptor)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        use crate::error::IoContext;
        std::fs::write(path, self.to_bytes()).io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        use crate::error::IoContext;
        let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes)
    }
}

/// Stacks records into a [B, leads, length] tensor.
pub fn stack_signals<S: Real>(records: &[&EcgRecord], leads: usize, length: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(records.len() * leads * length);
    for r in records {
        if r.leads() != leads || r.samples() != length {
            return Err(Error::shape("record", [leads, length], [r.leads(), r.samples()]));
        }
        data.extend(r.signal.as_slice().iter().map(|&v| S::of(v)));
    }
    Tensor::new(&[records.len(), leads, length], data)
}
