//! Class-conditional denoising diffusion over normalized multichannel
//! signals, with three interchangeable noise-prediction backbones.

mod backbone;
mod decomp;
mod schedule;

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{step_features, DecompositionVars};
pub use decomp::{decomposition_synthesize, top_amplitude_bins, top_harmonics, Decomposition, PolyProjector};
pub use schedule::{forward_diffuse, forward_diffuse_with_noise, NoiseSchedule};

use backbone::Backbone;
use crate::error::{Error, IoContext, Result};
use crate::nn::{Adam, Checkpoint, Graph, ParamStore, Real, Tensor, Var};
use crate::record::{Dataset, RhythmClass, Signal};
use crate::rng;
use crate::synth::{normalized_rows, training_shape, Generator, Normalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Gated residual stack with doubling dilations.
    Dilated,
    /// Three-level 1-D U-Net.
    Unet,
    /// Trend / seasonality / residual decomposition head.
    Decomposition,
}

impl BackboneKind {
    pub fn tag(self) -> &'static str {
        match self {
            BackboneKind::Dilated => "dilated",
            BackboneKind::Unet => "unet",
            BackboneKind::Decomposition => "decomposition",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dilated" => Ok(BackboneKind::Dilated),
            "unet" => Ok(BackboneKind::Unet),
            "decomposition" => Ok(BackboneKind::Decomposition),
            other => Err(Error::InvalidArgument(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmConfig {
    pub backbone: BackboneKind,
    /// Number of diffusion steps T.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub channels: usize,
    /// Residual layers (dilated), resolution levels (U-Net) or blocks
    /// (decomposition).
    pub layers: usize,
    pub kernel: usize,
    pub d_label: usize,
    pub d_time: usize,
    pub poly_degree: usize,
    pub harmonics: usize,
    pub n_classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
}

impl DdpmConfig {
    /// Reference configuration: 8 gated layers with dilations 1..128, C=32,
    /// linear β from 1e-4 to 0.02 over 200 steps.
    pub fn standard(backbone: BackboneKind) -> Self {
        Self {
            backbone,
            diffusion_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            channels: 32,
            layers: match backbone {
                BackboneKind::Dilated => 8,
                BackboneKind::Unet => 3,
                BackboneKind::Decomposition => 3,
            },
            kernel: 3,
            d_label: 128,
            d_time: 64,
            poly_degree: 3,
            harmonics: 8,
            n_classes: RhythmClass::COUNT,
            lr: 1e-3,
            batch_size: 16,
            train_steps: 2000,
        }
    }

    /// Reduced widths and step counts that train in a few minutes on one
    /// core.
    pub fn quick(backbone: BackboneKind) -> Self {
        Self {
            diffusion_steps: 50,
            beta_end: 0.2,
            channels: 16,
            layers: match backbone {
                BackboneKind::Dilated => 6,
                _ => 3,
            },
            d_time: 32,
            train_steps: 400,
            ..Self::standard(backbone)
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("diffusion_steps", self.diffusion_steps),
            ("channels", self.channels),
            ("layers", self.layers),
            ("kernel", self.kernel),
            ("d_label", self.d_label),
            ("d_time", self.d_time),
            ("n_classes", self.n_classes),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [("beta_start", self.beta_start), ("beta_end", self.beta_end)] {
            if !(v > 0.0 && v < 1.0) {
                bad.push(format!("{name} {v} outside (0, 1)"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Anything that predicts the injected noise from `x_t` [B, leads, L].
pub trait Denoiser<S: Real> {
    fn predict_noise(&self, g: &mut Graph<S>, x_t: Var, t: &[usize], labels: &[usize]) -> Result<Var>;
}

/// Mean squared error between `eps` and the denoiser's prediction at
/// `x_t = √ᾱ_t x0 + √(1−ᾱ_t) eps`.
pub fn diffusion_loss<S: Real>(
    g: &mut Graph<S>,
    denoiser: &dyn Denoiser<S>,
    schedule: &NoiseSchedule,
    x0: &Tensor<S>,
    eps: &Tensor<S>,
    t: &[usize],
    labels: &[usize],
) -> Result<Var> {
    let shape = x0.shape().to_vec();
    if eps.shape() != shape.as_slice() || shape.first() != Some(&t.len()) || t.len() != labels.len() {
        return Err(Error::shape("diffusion batch", &shape, eps.shape()));
    }
    let per = x0.numel() / t.len().max(1);
    let mut xt = Vec::with_capacity(x0.numel());
    for (b, &step) in t.iter().enumerate() {
        schedule.check_step(step)?;
        let ab = schedule.alpha_bar(step);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = b * per..(b + 1) * per;
        xt.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(x, e)| S::of(a * x.f64() + s * e.f64())));
    }
    let x_t = g.input(Tensor::new(&shape, xt)?);
    let target = g.input(eps.clone());
    let pred = denoiser.predict_noise(g, x_t, t, labels)?;
    g.mse(pred, target)
}

/// Ancestral sampling from `x_T ~ N(0, I)` with `σ_t = √β_t`. Each output
/// row draws from its own stream, so results do not depend on batching.
#[allow(clippy::too_many_arguments)]
pub fn sample_with<S: Real>(
    denoiser: &dyn Denoiser<S>,
    store: &ParamStore<S>,
    schedule: &NoiseSchedule,
    leads: usize,
    length: usize,
    labels: &[usize],
    seed: u64,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let per = leads * length;
    let mut out = Vec::with_capacity(labels.len());
    for (c, chunk) in labels.chunks(batch.max(1)).enumerate() {
        let first = c * batch.max(1);
        let mut streams: Vec<_> = (0..chunk.len()).map(|i| rng::child(seed, (first + i) as u64)).collect();
        let mut x: Vec<f64> = streams.iter_mut().flat_map(|r| rng::normals(r, per)).collect();
        for t in (1..=schedule.steps()).rev() {
            let eps = {
                let mut g = Graph::new(store, false, 0);
                let xv = g.input(Tensor::from_f64(&[chunk.len(), leads, length], &x)?);
                let steps = vec![t; chunk.len()];
                let e = denoiser.predict_noise(&mut g, xv, &steps, chunk)?;
                g.value(e).to_f64()
            };
            let (beta, ab) = (schedule.beta(t), schedule.alpha_bar(t));
            let coef = beta / (1.0 - ab).sqrt();
            let inv = 1.0 / (1.0 - beta).sqrt();
            let sigma = beta.sqrt();
            for (b, r) in streams.iter_mut().enumerate() {
                let noise = if t > 1 { rng::normals(r, per) } else { vec![0.0; per] };
                for j in 0..per {
                    let k = b * per + j;
                    x[k] = inv * (x[k] - coef * eps[k]) + sigma * noise[j];
                }
            }
            if let Some(k) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite sample value at reverse step {t} (row {})", first + k / per)));
            }
        }
        out.extend(x.chunks(per).map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: DdpmConfig,
    leads: usize,
    length: usize,
    normalizer: Normalizer,
}

const DESCRIPTOR_PREFIX: &str = "ecgsyn.ddpm/1 ";
const SAMPLE_BATCH: usize = 32;

/// A diffusion model with its backbone, schedule and data statistics.
#[derive(Debug, Clone)]
pub struct Ddpm<S: Real = f32> {
    pub config: DdpmConfig,
    pub leads: usize,
    pub length: usize,
    pub normalizer: Normalizer,
    pub schedule: NoiseSchedule,
    pub store: ParamStore<S>,
    pub seed: u64,
    backbone: Backbone,
    name: String,
}

impl<S: Real> Ddpm<S> {
    pub fn new(config: &DdpmConfig, leads: usize, length: usize, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if normalizer.leads() != leads {
            return Err(Error::shape("normalizer", [leads], [normalizer.leads()]));
        }
        if length < config.kernel {
            return Err(Error::shape("ddpm input length", [config.kernel], [length]));
        }
        let mut store = ParamStore::new();
        let mut r = rng::child(seed, 0xD1FF);
        let backbone = Backbone::new(&mut store, config, leads, length, &mut r)?;
        Ok(Self {
            config: config.clone(),
            leads,
            length,
            normalizer,
            schedule: config.schedule()?,
            store,
            seed,
            backbone,
            name: format!("ddpm-{}", config.backbone.tag()),
        })
    }

    pub fn denoiser(&self) -> &dyn Denoiser<S> {
        &self.backbone
    }

    /// Component view of the decomposition backbone's `x̂0` estimate.
    pub fn decompose(&self, g: &mut Graph<S>, x_t: Var, t: &[usize], labels: &[usize]) -> Result<DecompositionVars> {
        match &self.backbone {
            Backbone::Decomposition(d) => d.decompose(g, x_t, t, labels),
            _ => Err(Error::State(format!("{} has no decomposition head", self.name))),
        }
    }

    /// Loss for a normalized batch with explicit steps and noise; builds
    /// the graph on the model's own store.
    pub fn loss_graph<'a>(&'a self, g: &mut Graph<'a, S>, x0: &Tensor<S>, eps: &Tensor<S>, t: &[usize], labels: &[usize]) -> Result<Var> {
        diffusion_loss(g, &self.backbone, &self.schedule, x0, eps, t, labels)
    }

    /// One optimizer step on a normalized batch with uniformly drawn steps
    /// and fresh noise. Returns the batch loss.
    pub fn train_step(&mut self, adam: &mut Adam<S>, rows: &[&[f64]], labels: &[usize], r: &mut impl Rng) -> Result<f64> {
        let b = rows.len();
        let per = self.leads * self.length;
        if rows.iter().any(|row| row.len() != per) {
            return Err(Error::shape("ddpm batch row", [per], [rows.iter().map(|r| r.len()).find(|&l| l != per).unwrap_or(0)]));
        }
        let t: Vec<usize> = (0..b).map(|_| r.random_range(1..=self.schedule.steps())).collect();
        let eps = rng::normals(r, b * per);
        let x0: Vec<f64> = rows.iter().flat_map(|row| row.iter().copied()).collect();
        let shape = [b, self.leads, self.length];
        let (x0, eps) = (Tensor::from_f64(&shape, &x0)?, Tensor::from_f64(&shape, &eps)?);
        let (value, grads) = {
            let mut g = Graph::new(&self.store, true, r.random());
            let loss = self.loss_graph(&mut g, &x0, &eps, &t, labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("diffusion loss {value} on batch with steps {t:?} and labels {labels:?}")));
            }
            (value, g.backward(loss))
        };
        self.store.accumulate(&grads);
        adam.step(&mut self.store)?;
        Ok(value)
    }

    /// Normalized-domain samples for class ids `labels`.
    pub fn sample_normalized(&self, labels: &[usize], seed: u64) -> Result<Vec<Vec<f64>>> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::Index {
                index: bad,
                bound: self.config.n_classes,
            });
        }
        sample_with(&self.backbone, &self.store, &self.schedule, self.leads, self.length, labels, seed, SAMPLE_BATCH)
    }

    pub fn descriptor(&self) -> String {
        let d = Descriptor {
            config: self.config.clone(),
            leads: self.leads,
            length: self.length,
            normalizer: self.normalizer.clone(),
        };
        format!("{DESCRIPTOR_PREFIX}{}", serde_json::to_string(&d).expect("serializable"))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        Checkpoint::from_store(&self.store, &self.descriptor(), self.seed).to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::<S>::from_bytes(bytes)?;
        let json = ck
            .descriptor
            .strip_prefix(DESCRIPTOR_PREFIX)
            .ok_or_else(|| Error::Version(format!("not a diffusion checkpoint: {}", ck.descriptor)))?;
        let d: Descriptor = serde_json::from_str(json).map_err(|e| Error::Version(format!("bad descriptor: {e}")))?;
        let mut model = Self::new(&d.config, d.leads, d.length, d.normalizer, ck.seed)?;
        let descriptor = model.descriptor();
        ck.apply(&mut model.store, &descriptor)?;
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

impl<S: Real> Generator for Ddpm<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn leads(&self) -> usize {
        self.leads
    }

    fn length(&self) -> usize {
        self.length
    }

    fn sample(&self, label: RhythmClass, n: usize, seed: u64) -> Result<Vec<Signal>> {
        let rows = self.sample_normalized(&vec![label.id(); n], seed)?;
        rows.iter().map(|r| self.normalizer.denormalize(r, self.length)).collect()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.checkpoint_bytes()
    }
}

/// Per-step losses and timing of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub wall_time_s: f64,
}

/// Trains a diffusion model on `ds` for `config.train_steps` steps.
pub fn train_ddpm(ds: &Dataset, config: &DdpmConfig, seed: u64) -> Result<(Ddpm<f32>, TrainLog)> {
    let start = Instant::now();
    let (leads, length) = training_shape(ds)?;
    let normalizer = Normalizer::fit(ds)?;
    let (rows, labels) = normalized_rows(ds, &normalizer)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.n_classes) {
        return Err(Error::Index {
            index: bad,
            bound: config.n_classes,
        });
    }
    let mut model: Ddpm<f32> = Ddpm::new(config, leads, length, normalizer, seed)?;
    let mut adam = Adam::new(config.lr);
    let mut r = rng::child(seed, 0x7EA1);
    let mut log = TrainLog::default();
    for step in 0..config.train_steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| r.random_range(0..rows.len())).collect();
        let batch: Vec<&[f64]> = idx.iter().map(|&i| rows[i].as_slice()).collect();
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = model.train_step(&mut adam, &batch, &lab, &mut r)?;
        if step % 50 == 0 {
            log::debug!("{} step {step}: loss {loss:.4}", model.name);
        }
        log.losses.push(loss);
    }
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok((model, log))
}
