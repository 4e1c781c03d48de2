//! Two-stage vector-quantized generator: dual-branch (low/high frequency)
//! quantized autoencoders over STFT planes, then masked-token transformer
//! priors decoded by iterative parallel unmasking.

mod codebook;
mod prior;
mod stage1;

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use codebook::{Codebook, EmaState};
pub use prior::{MaskSchedule, TokenGrid};
pub use stage1::{BranchKind, Geometry};

use crate::dsp::default_cutoff;
use crate::error::{Error, IoContext, Result};
use crate::nn::{Adam, Checkpoint, Graph, ParamStore, Real, Tensor, Var};
use crate::record::{Dataset, RhythmClass, Signal};
use crate::rng;
use crate::synth::{normalized_rows, training_shape, Generator, Normalizer};
use prior::{iterative_decode, mask_random, Prior, PriorShape};
use stage1::{Branch, IstftOp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqvaeConfig {
    pub n_fft: usize,
    pub hop: usize,
    /// First high-frequency bin; 0 picks the default split.
    pub cutoff: usize,
    pub hidden: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub lf_rate: usize,
    pub hf_rate: usize,
    pub commitment: f64,
    pub ema_decay: f64,
    pub prior_dim: usize,
    pub prior_heads: usize,
    pub prior_hidden: usize,
    pub prior_layers: usize,
    pub prior_dropout: f64,
    pub decode_steps: usize,
    pub temp_start: f64,
    pub temp_end: f64,
    /// Temperature of the categorical draw of training tokens from encoder
    /// distances; 0 takes the nearest code.
    pub token_temperature: f64,
    pub n_classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

impl VqvaeConfig {
    pub fn standard() -> Self {
        Self {
            n_fft: crate::dsp::DEFAULT_N_FFT,
            hop: crate::dsp::DEFAULT_HOP,
            cutoff: 0,
            hidden: 64,
            code_dim: 32,
            codebook_size: 64,
            lf_rate: 4,
            hf_rate: 2,
            commitment: 0.25,
            ema_decay: 0.99,
            prior_dim: 64,
            prior_heads: 4,
            prior_hidden: 128,
            prior_layers: 2,
            prior_dropout: 0.1,
            decode_steps: 8,
            temp_start: 1.0,
            temp_end: 0.1,
            token_temperature: 0.05,
            n_classes: RhythmClass::COUNT,
            lr: 1e-3,
            batch_size: 16,
            stage1_steps: 1500,
            stage2_steps: 1500,
        }
    }

    pub fn quick() -> Self {
        Self {
            hidden: 32,
            prior_dim: 32,
            prior_hidden: 64,
            stage1_steps: 400,
            stage2_steps: 400,
            ..Self::standard()
        }
    }

    pub fn cutoff_bin(&self) -> usize {
        if self.cutoff == 0 {
            default_cutoff(self.n_fft)
        } else {
            self.cutoff
        }
    }

    pub fn schedule(&self) -> Result<MaskSchedule> {
        MaskSchedule::new(self.decode_steps, self.temp_start, self.temp_end)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("hidden", self.hidden),
            ("code_dim", self.code_dim),
            ("prior_dim", self.prior_dim),
            ("prior_heads", self.prior_heads),
            ("prior_hidden", self.prior_hidden),
            ("decode_steps", self.decode_steps),
            ("n_classes", self.n_classes),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if self.codebook_size < 2 {
            bad.push(format!("codebook_size {} must be >= 2", self.codebook_size));
        }
        for (name, v) in [("lf_rate", self.lf_rate), ("hf_rate", self.hf_rate)] {
            if !v.is_power_of_two() {
                bad.push(format!("{name} {v} must be a power of two"));
            }
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < 4 || self.hop == 0 || self.hop > self.n_fft {
            bad.push(format!("n_fft {} / hop {} invalid", self.n_fft, self.hop));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            bad.push(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if !(self.commitment >= 0.0 && self.token_temperature >= 0.0) {
            bad.push("commitment and token_temperature must be >= 0".into());
        }
        if !(self.temp_start > 0.0 && self.temp_end > 0.0) {
            bad.push("decode temperatures must be positive".into());
        }
        if !(0.0..1.0).contains(&self.prior_dropout) {
            bad.push(format!("prior_dropout {} outside [0, 1)", self.prior_dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if self.prior_heads > 0 && self.prior_dim % self.prior_heads != 0 {
            bad.push(format!("prior_dim {} not divisible by {} heads", self.prior_dim, self.prior_heads));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Branch planes and per-branch time-domain targets of a normalized batch.
#[derive(Debug, Clone)]
pub struct Stage1Batch<S: Real> {
    pub planes: [Tensor<S>; 2],
    pub targets: [Tensor<S>; 2],
}

impl<S: Real> Stage1Batch<S> {
    pub fn new(geometry: &Geometry, rows: &[&[f64]]) -> Result<Self> {
        let b = rows.len();
        let mut planes = [Vec::new(), Vec::new()];
        let mut targets = [Vec::new(), Vec::new()];
        for row in rows {
            let (lf, hf) = geometry.spectral_planes(row)?;
            targets[0].extend(geometry.synthesize(BranchKind::Lf, &lf));
            targets[1].extend(geometry.synthesize(BranchKind::Hf, &hf));
            planes[0].extend(lf);
            planes[1].extend(hf);
        }
        let f = geometry.frames;
        let sig = [b, geometry.leads, geometry.length];
        Ok(Self {
            planes: [
                Tensor::from_f64(&[b, geometry.channels(BranchKind::Lf), f], &planes[0])?,
                Tensor::from_f64(&[b, geometry.channels(BranchKind::Hf), f], &planes[1])?,
            ],
            targets: [Tensor::from_f64(&sig, &targets[0])?, Tensor::from_f64(&sig, &targets[1])?],
        })
    }

    pub fn len(&self) -> usize {
        self.planes[0].dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph outputs of one stage-1 pass.
pub struct Stage1Pass {
    pub loss: Var,
    /// Branch reconstructions [B, leads, L].
    pub recon: [Var; 2],
    pub recon_loss: [Var; 2],
    /// Encoder outputs as rows [B·w, d].
    pub latents: [Vec<f64>; 2],
    /// Code indices [B·w]; empty when quantization is bypassed.
    pub tokens: [Vec<usize>; 2],
}

/// Training tokens for the priors: either fixed grids or frozen-encoder
/// latents from which tokens are drawn each step.
#[derive(Debug, Clone)]
pub struct TokenCorpus {
    pub labels: Vec<usize>,
    source: CorpusSource,
}

#[derive(Debug, Clone)]
enum CorpusSource {
    Tokens([Vec<Vec<usize>>; 2]),
    Latents {
        rows: [Vec<Vec<f64>>; 2],
        books: Box<[Codebook; 2]>,
        temperature: f64,
    },
}

fn draw_code(book: &Codebook, z: &[f64], temperature: f64, r: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        return book.nearest(z);
    }
    let d: Vec<f64> = (0..book.size)
        .map(|k| z.iter().zip(book.code(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    let m = d.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|v| (-(v - m) / temperature).exp()).collect();
    let u = r.random::<f64>() * w.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, wk) in w.iter().enumerate() {
        acc += wk;
        if u < acc {
            return k;
        }
    }
    book.nearest(z)
}

impl TokenCorpus {
    pub fn from_tokens(lf: Vec<Vec<usize>>, hf: Vec<Vec<usize>>, labels: Vec<usize>) -> Result<Self> {
        if lf.len() != labels.len() || hf.len() != labels.len() {
            return Err(Error::shape("token corpus", [labels.len(), labels.len()], [lf.len(), hf.len()]));
        }
        Ok(Self {
            labels,
            source: CorpusSource::Tokens([lf, hf]),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Token grids of record `i`.
    pub fn draw(&self, i: usize, r: &mut impl Rng) -> [Vec<usize>; 2] {
        match &self.source {
            CorpusSource::Tokens(t) => [t[0][i].clone(), t[1][i].clone()],
            CorpusSource::Latents { rows, books, temperature } => [0, 1].map(|b| {
                rows[b][i]
                    .chunks(books[b].dim)
                    .map(|z| draw_code(&books[b], z, *temperature, r))
                    .collect()
            }),
        }
    }
}

/// Held-out style evaluation of the priors at a fixed mask ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorEval {
    pub loss_lf: f64,
    pub loss_hf: f64,
    /// Argmax accuracy over all masked cells of both priors.
    pub accuracy: f64,
    pub masked: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Log {
    pub losses: Vec<f64>,
    /// Per-code assignment counts after warmup.
    pub usage: [Vec<u64>; 2],
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: VqvaeConfig,
    leads: usize,
    length: usize,
    normalizer: Normalizer,
    stage1_frozen: bool,
}

const DESCRIPTOR_PREFIX: &str = "ecgsyn.vqvae/1 ";
const BATCH: usize = 32;
const STAGE1: [&str; 4] = ["enc_lf", "enc_hf", "dec_lf", "dec_hf"];
const PRIORS: [&str; 2] = ["prior_lf", "prior_hf"];

fn to_rows(z: &[f64], b: usize, d: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for i in 0..b {
        for c in 0..d {
            for j in 0..w {
                out[(i * w + j) * d + c] = z[(i * d + c) * w + j];
            }
        }
    }
    out
}

fn from_rows(rows: &[f64], b: usize, d: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for i in 0..b {
        for j in 0..w {
            for c in 0..d {
                out[(i * d + c) * w + j] = rows[(i * w + j) * d + c];
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Vqvae<S: Real = f32> {
    pub config: VqvaeConfig,
    pub leads: usize,
    pub length: usize,
    pub normalizer: Normalizer,
    pub geometry: Geometry,
    pub store: ParamStore<S>,
    pub seed: u64,
    branches: [Branch; 2],
    priors: [Prior; 2],
    stage1_frozen: bool,
}

impl<S: Real> Vqvae<S> {
    pub fn new(config: &VqvaeConfig, leads: usize, length: usize, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if normalizer.leads() != leads {
            return Err(Error::shape("normalizer", [leads], [normalizer.leads()]));
        }
        let geometry = Geometry::new(leads, length, config.n_fft, config.hop, config.cutoff_bin())?;
        let mut store = ParamStore::new();
        let mut r = rng::child(seed, 0x5EC0);
        let branch = |store: &mut ParamStore<S>, kind, rate, r: &mut _| {
            Branch::new(
                store,
                kind,
                geometry.channels(kind),
                config.hidden,
                config.code_dim,
                config.codebook_size,
                rate,
                geometry.frames,
                r,
            )
        };
        let lf = branch(&mut store, BranchKind::Lf, config.lf_rate, &mut r)?;
        let hf = branch(&mut store, BranchKind::Hf, config.hf_rate, &mut r)?;
        let shape = |n_ctx, n_tok| PriorShape {
            codes: config.codebook_size,
            n_classes: config.n_classes,
            n_ctx,
            n_tok,
            dim: config.prior_dim,
            heads: config.prior_heads,
            hidden: config.prior_hidden,
            layers: config.prior_layers,
            dropout: config.prior_dropout,
        };
        let prior_lf = Prior::new(&mut store, PRIORS[0], &shape(0, lf.width), &mut r)?;
        let prior_hf = Prior::new(&mut store, PRIORS[1], &shape(lf.width, hf.width), &mut r)?;
        Ok(Self {
            config: config.clone(),
            leads,
            length,
            normalizer,
            geometry,
            store,
            seed,
            branches: [lf, hf],
            priors: [prior_lf, prior_hf],
            stage1_frozen: false,
        })
    }

    /// Token grid widths of the LF and HF branches.
    pub fn grid_widths(&self) -> [usize; 2] {
        [self.branches[0].width, self.branches[1].width]
    }

    pub fn codebook(&self, kind: BranchKind) -> Result<Codebook> {
        let b = &self.branches[kind as usize];
        Codebook::new(self.store.value(b.codebook).to_f64(), self.config.codebook_size, self.config.code_dim)
    }

    fn set_codebook(&mut self, kind: BranchKind, book: &Codebook) -> Result<()> {
        let id = self.branches[kind as usize].codebook;
        self.store.get_mut(id).value = Tensor::from_f64(&[book.size, book.dim], &book.vectors)?;
        Ok(())
    }

    pub fn stage1_frozen(&self) -> bool {
        self.stage1_frozen
    }

    /// Freezes encoders, decoders and codebooks and unfreezes the priors.
    pub fn freeze_stage1(&mut self) {
        for p in STAGE1 {
            self.store.set_frozen_prefix(p, true);
        }
        for p in PRIORS {
            self.store.set_frozen_prefix(p, false);
        }
        self.stage1_frozen = true;
    }

    /// Stage-1 loss: per-branch time-domain reconstruction MSE plus the
    /// commitment term. With `quantize` false the decoders see the raw
    /// encoder outputs.
    pub fn stage1_pass(&self, g: &mut Graph<'_, S>, batch: &Stage1Batch<S>, quantize: bool) -> Result<Stage1Pass> {
        let (b, d) = (batch.len(), self.config.code_dim);
        let mut recon = Vec::new();
        let mut recon_loss = Vec::new();
        let mut latents = [Vec::new(), Vec::new()];
        let mut tokens = [Vec::new(), Vec::new()];
        let mut total: Option<Var> = None;
        for (i, br) in self.branches.iter().enumerate() {
            let w = br.width;
            let x = g.input(batch.planes[i].clone());
            let z = br.encode(g, x)?;
            let zv = g.value(z).to_f64();
            latents[i] = to_rows(&zv, b, d, w);
            let mut commit = None;
            let zin = if quantize {
                let (zq, idx) = self.codebook(br.kind)?.quantize(&latents[i])?;
                let zq = from_rows(&zq, b, d, w);
                let delta: Vec<f64> = zq.iter().zip(&zv).map(|(q, z)| q - z).collect();
                let dv = g.input(Tensor::from_f64(&[b, d, w], &delta)?);
                let target = g.input(Tensor::from_f64(&[b, d, w], &zq)?);
                let c = g.mse(z, target)?;
                commit = Some(g.scale(c, self.config.commitment));
                tokens[i] = idx;
                g.add(z, dv)?
            } else {
                z
            };
            let planes = br.decode(g, zin, self.geometry.frames)?;
            let op = IstftOp {
                geometry: self.geometry.clone(),
                branch: br.kind,
            };
            let rec = g.custom(&[planes], Box::new(op))?;
            let tgt = g.input(batch.targets[i].clone());
            let l = g.mse(rec, tgt)?;
            let mut term = l;
            if let Some(c) = commit {
                term = g.add(term, c)?;
            }
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
            recon.push(rec);
            recon_loss.push(l);
        }
        Ok(Stage1Pass {
            loss: total.expect("two branches"),
            recon: [recon[0], recon[1]],
            recon_loss: [recon_loss[0], recon_loss[1]],
            latents,
            tokens,
        })
    }

    fn encode_latents(&self, rows: &[&[f64]]) -> Result<[Vec<Vec<f64>>; 2]> {
        let mut out = [Vec::new(), Vec::new()];
        for chunk in rows.chunks(BATCH) {
            let batch = Stage1Batch::new(&self.geometry, chunk)?;
            let mut g = Graph::new(&self.store, false, 0);
            let pass = self.stage1_pass(&mut g, &batch, false)?;
            for (i, br) in self.branches.iter().enumerate() {
                let per = br.width * self.config.code_dim;
                out[i].extend(pass.latents[i].chunks(per).map(<[f64]>::to_vec));
            }
        }
        Ok(out)
    }

    /// Nearest-code token grids of normalized rows.
    pub fn encode_tokens(&self, rows: &[&[f64]]) -> Result<[Vec<Vec<usize>>; 2]> {
        let latents = self.encode_latents(rows)?;
        let mut out = [Vec::new(), Vec::new()];
        for (i, br) in self.branches.iter().enumerate() {
            let book = self.codebook(br.kind)?;
            for z in &latents[i] {
                out[i].push(book.quantize(z)?.1);
            }
        }
        Ok(out)
    }

    /// Mean reconstruction MSE over `rows`, with or without quantization.
    pub fn reconstruction_error(&self, rows: &[&[f64]], quantize: bool) -> Result<f64> {
        let mut sum = 0.0;
        for chunk in rows.chunks(BATCH) {
            let batch = Stage1Batch::new(&self.geometry, chunk)?;
            let mut g = Graph::new(&self.store, false, 0);
            let pass = self.stage1_pass(&mut g, &batch, quantize)?;
            let target: Vec<f64> = chunk.iter().flat_map(|r| r.iter().copied()).collect();
            let a = g.value(pass.recon[0]).to_f64();
            let b = g.value(pass.recon[1]).to_f64();
            sum += target.iter().zip(a.iter().zip(&b)).map(|(t, (x, y))| (x + y - t).powi(2)).sum::<f64>();
        }
        Ok(sum / (rows.len() * self.leads * self.length).max(1) as f64)
    }

    fn init_codebooks(&mut self, rows: &[&[f64]], r: &mut impl Rng) -> Result<()> {
        let take = rows.len().min(64);
        let pick: Vec<&[f64]> = rng::permutation(r, rows.len()).into_iter().take(take).map(|i| rows[i]).collect();
        let latents = self.encode_latents(&pick)?;
        let (k, d) = (self.config.codebook_size, self.config.code_dim);
        for (i, kind) in [BranchKind::Lf, BranchKind::Hf].into_iter().enumerate() {
            let pool: Vec<&[f64]> = latents[i].iter().flat_map(|z| z.chunks(d)).collect();
            let order = rng::permutation(r, pool.len());
            let mut vectors = Vec::with_capacity(k * d);
            for j in 0..k {
                let src = if j < pool.len() { order[j] } else { r.random_range(0..pool.len()) };
                vectors.extend(pool[src].iter().map(|v| v + 1e-3 * rng::normal(r)));
            }
            self.set_codebook(kind, &Codebook::new(vectors, k, d)?)?;
        }
        Ok(())
    }

    /// Trains encoders and decoders with Adam and the codebooks by EMA.
    pub fn train_stage1(&mut self, rows: &[&[f64]], seed: u64) -> Result<Stage1Log> {
        self.train_stage1_with(rows, seed, true)
    }

    /// Stage-1 training; with `quantize` false the decoders are trained on
    /// raw encoder outputs and the codebooks stay at their data init.
    pub fn train_stage1_with(&mut self, rows: &[&[f64]], seed: u64, quantize: bool) -> Result<Stage1Log> {
        if self.stage1_frozen {
            return Err(Error::State("stage 1 is frozen".into()));
        }
        if rows.is_empty() {
            return Err(Error::SampleSize { needed: 1, got: 0 });
        }
        for p in PRIORS {
            self.store.set_frozen_prefix(p, true);
        }
        let mut r = rng::child(seed, 0x57A1);
        self.init_codebooks(rows, &mut r)?;
        let mut books = [self.codebook(BranchKind::Lf)?, self.codebook(BranchKind::Hf)?];
        let mut ema = [EmaState::new(&books[0], self.config.ema_decay), EmaState::new(&books[1], self.config.ema_decay)];
        let mut adam = Adam::new(self.config.lr);
        let warmup = self.config.stage1_steps / 4;
        let mut log = Stage1Log::default();
        for step in 0..self.config.stage1_steps {
            if step == warmup {
                for e in &mut ema {
                    e.usage.iter_mut().for_each(|u| *u = 0);
                }
            }
            let batch: Vec<&[f64]> = (0..self.config.batch_size).map(|_| rows[r.random_range(0..rows.len())]).collect();
            let batch = Stage1Batch::new(&self.geometry, &batch)?;
            let (value, grads, latents, tokens) = {
                let mut g = Graph::new(&self.store, true, r.random());
                let pass = self.stage1_pass(&mut g, &batch, quantize)?;
                let value = g.value(pass.loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("stage-1 loss {value} at step {step}")));
                }
                (value, g.backward(pass.loss), pass.latents, pass.tokens)
            };
            self.store.accumulate(&grads);
            adam.step(&mut self.store)?;
            if quantize {
                for i in 0..2 {
                    ema[i].update(&mut books[i], &latents[i], &tokens[i]);
                }
                self.set_codebook(BranchKind::Lf, &books[0])?;
                self.set_codebook(BranchKind::Hf, &books[1])?;
            }
            if step % 50 == 0 {
                log::debug!("vqvae stage 1 step {step}: loss {value:.5}");
            }
            log.losses.push(value);
        }
        for (i, kind) in [BranchKind::Lf, BranchKind::Hf].into_iter().enumerate() {
            if quantize && self.config.stage1_steps > warmup && ema[i].used_codes() <= 1 {
                log::warn!("dead {} codebook: usage histogram {:?}", kind.tag(), ema[i].usage);
            }
        }
        log.usage = [ema[0].usage.clone(), ema[1].usage.clone()];
        Ok(log)
    }

    /// Frozen-encoder latents of `rows`, from which training tokens are
    /// drawn at `config.token_temperature`.
    pub fn token_corpus(&self, rows: &[&[f64]], labels: &[usize]) -> Result<TokenCorpus> {
        if rows.len() != labels.len() {
            return Err(Error::shape("token corpus", [rows.len()], [labels.len()]));
        }
        let latents = self.encode_latents(rows)?;
        Ok(TokenCorpus {
            labels: labels.to_vec(),
            source: CorpusSource::Latents {
                rows: latents,
                books: Box::new([self.codebook(BranchKind::Lf)?, self.codebook(BranchKind::Hf)?]),
                temperature: self.config.token_temperature,
            },
        })
    }

    fn check_corpus(&self, corpus: &TokenCorpus) -> Result<()> {
        if let Some(&bad) = corpus.labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::Index {
                index: bad,
                bound: self.config.n_classes,
            });
        }
        if let CorpusSource::Tokens(t) = &corpus.source {
            for (i, grids) in t.iter().enumerate() {
                for grid in grids {
                    if grid.len() != self.branches[i].width {
                        return Err(Error::shape("token grid", [self.branches[i].width], [grid.len()]));
                    }
                    if let Some(&bad) = grid.iter().find(|&&c| c >= self.config.codebook_size) {
                        return Err(Error::Index {
                            index: bad,
                            bound: self.config.codebook_size,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Masked-token loss of both priors; `inputs` carry MASK cells and
    /// `targets` the clean grids, flattened over the batch.
    pub fn prior_loss(
        &self,
        g: &mut Graph<'_, S>,
        inputs: &[Vec<usize>; 2],
        targets: &[Vec<usize>; 2],
        labels: &[usize],
    ) -> Result<(Var, [Var; 2])> {
        let (l_lf, logit_lf) = self.priors[0].masked_loss(g, &inputs[0], &targets[0], &[], labels)?;
        let (l_hf, logit_hf) = self.priors[1].masked_loss(g, &inputs[1], &targets[1], &targets[0], labels)?;
        Ok((g.add(l_lf, l_hf)?, [logit_lf, logit_hf]))
    }

    /// Trains both priors with cosine-distributed mask ratios. Stage 1 must
    /// be frozen.
    pub fn train_stage2(&mut self, corpus: &TokenCorpus, seed: u64) -> Result<Vec<f64>> {
        if !self.stage1_frozen {
            return Err(Error::State("stage 2 requires a frozen stage 1".into()));
        }
        if corpus.is_empty() {
            return Err(Error::SampleSize { needed: 1, got: 0 });
        }
        self.check_corpus(corpus)?;
        let mut r = rng::child(seed, 0x57A2);
        let mut adam = Adam::new(self.config.lr);
        let mut losses = Vec::with_capacity(self.config.stage2_steps);
        for step in 0..self.config.stage2_steps {
            let mut inputs = [Vec::new(), Vec::new()];
            let mut targets = [Vec::new(), Vec::new()];
            let mut labels = Vec::with_capacity(self.config.batch_size);
            for _ in 0..self.config.batch_size {
                let i = r.random_range(0..corpus.len());
                let grids = corpus.draw(i, &mut r);
                for (b, grid) in grids.into_iter().enumerate() {
                    let n = grid.len();
                    let count = ((MaskSchedule::gamma(r.random::<f64>()) * n as f64).ceil() as usize).clamp(1, n);
                    inputs[b].extend(mask_random(&grid, count, &mut r));
                    targets[b].extend(grid);
                }
                labels.push(corpus.labels[i]);
            }
            let (value, grads) = {
                let mut g = Graph::new(&self.store, true, r.random());
                let (loss, _) = self.prior_loss(&mut g, &inputs, &targets, &labels)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("stage-2 loss {value} at step {step}")));
                }
                (value, g.backward(loss))
            };
            self.store.accumulate(&grads);
            adam.step(&mut self.store)?;
            if step % 50 == 0 {
                log::debug!("vqvae stage 2 step {step}: loss {value:.4}");
            }
            losses.push(value);
        }
        Ok(losses)
    }

    /// Loss and argmax accuracy of the priors with `ceil(ratio·w)` random
    /// cells masked per grid.
    pub fn evaluate_prior(&self, corpus: &TokenCorpus, mask_ratio: f64, seed: u64) -> Result<PriorEval> {
        self.check_corpus(corpus)?;
        let mut r = rng::child(seed, 0xE7A1);
        let mut sums = [0.0; 2];
        let mut weights = [0.0; 2];
        let (mut hits, mut masked) = (0usize, 0usize);
        let idx: Vec<usize> = (0..corpus.len()).collect();
        for chunk in idx.chunks(BATCH) {
            let mut inputs = [Vec::new(), Vec::new()];
            let mut targets = [Vec::new(), Vec::new()];
            let labels: Vec<usize> = chunk.iter().map(|&i| corpus.labels[i]).collect();
            for &i in chunk {
                for (b, grid) in corpus.draw(i, &mut r).into_iter().enumerate() {
                    let count = ((mask_ratio.clamp(0.0, 1.0) * grid.len() as f64).ceil() as usize).min(grid.len());
                    inputs[b].extend(mask_random(&grid, count, &mut r));
                    targets[b].extend(grid);
                }
            }
            let mut g = Graph::new(&self.store, false, 0);
            let (_, logits) = self.prior_loss(&mut g, &inputs, &targets, &labels)?;
            let k = self.config.codebook_size;
            for b in 0..2 {
                let lv = g.value(logits[b]).to_f64();
                for (j, row) in lv.chunks(k).enumerate() {
                    if inputs[b][j] != TokenGrid::MASK {
                        continue;
                    }
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    sums[b] += lse - row[targets[b][j]];
                    weights[b] += 1.0;
                    masked += 1;
                    if crate::classifier::argmax(row) == targets[b][j] {
                        hits += 1;
                    }
                }
            }
        }
        let mean = |s: f64, w: f64| if w > 0.0 { s / w } else { 0.0 };
        Ok(PriorEval {
            loss_lf: mean(sums[0], weights[0]),
            loss_hf: mean(sums[1], weights[1]),
            accuracy: if masked > 0 { hits as f64 / masked as f64 } else { 1.0 },
            masked,
        })
    }

    /// LF grids, then HF grids conditioned on them, for class ids `labels`.
    pub fn sample_tokens(&self, labels: &[usize], seed: u64) -> Result<[Vec<Vec<usize>>; 2]> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::Index {
                index: bad,
                bound: self.config.n_classes,
            });
        }
        let schedule = self.config.schedule()?;
        let mut out = [Vec::new(), Vec::new()];
        for (c, chunk) in labels.chunks(BATCH).enumerate() {
            let mut streams: Vec<_> = (0..chunk.len()).map(|i| rng::child(seed, (c * BATCH + i) as u64)).collect();
            let lf = iterative_decode(&self.priors[0], &self.store, &schedule, &[], chunk, &mut streams)?;
            let ctx: Vec<usize> = lf.iter().flatten().copied().collect();
            let hf = iterative_decode(&self.priors[1], &self.store, &schedule, &ctx, chunk, &mut streams)?;
            out[0].extend(lf);
            out[1].extend(hf);
        }
        Ok(out)
    }

    /// Decoder planes of token grids, one `[channels × frames]` block per
    /// row and branch.
    pub fn decode_planes(&self, tokens: &[Vec<Vec<usize>>; 2]) -> Result<[Vec<Vec<f64>>; 2]> {
        let (d, frames) = (self.config.code_dim, self.geometry.frames);
        let mut out = [Vec::new(), Vec::new()];
        for (i, br) in self.branches.iter().enumerate() {
            let book = self.codebook(br.kind)?;
            let w = br.width;
            for chunk in tokens[i].chunks(BATCH) {
                let b = chunk.len();
                let mut rows = Vec::with_capacity(b * w * d);
                for grid in chunk {
                    if grid.len() != w {
                        return Err(Error::shape("token grid", [w], [grid.len()]));
                    }
                    rows.extend(book.lookup(grid)?);
                }
                let mut g = Graph::new(&self.store, false, 0);
                let z = g.input(Tensor::from_f64(&[b, d, w], &from_rows(&rows, b, d, w))?);
                let planes = br.decode(&mut g, z, frames)?;
                let per = self.geometry.channels(br.kind) * frames;
                out[i].extend(g.value(planes).to_f64().chunks(per).map(<[f64]>::to_vec));
            }
        }
        Ok(out)
    }

    /// Normalized series `istft(LF) + istft(HF)` of token grids.
    pub fn decode_tokens(&self, tokens: &[Vec<Vec<usize>>; 2]) -> Result<Vec<Vec<f64>>> {
        let planes = self.decode_planes(tokens)?;
        Ok(planes[0]
            .iter()
            .zip(&planes[1])
            .map(|(lf, hf)| {
                let a = self.geometry.synthesize(BranchKind::Lf, lf);
                let b = self.geometry.synthesize(BranchKind::Hf, hf);
                a.iter().zip(&b).map(|(x, y)| x + y).collect()
            })
            .collect())
    }

    pub fn sample_normalized(&self, labels: &[usize], seed: u64) -> Result<Vec<Vec<f64>>> {
        let tokens = self.sample_tokens(labels, seed)?;
        self.decode_tokens(&tokens)
    }

    pub fn descriptor(&self) -> String {
        let d = Descriptor {
            config: self.config.clone(),
            leads: self.leads,
            length: self.length,
            normalizer: self.normalizer.clone(),
            stage1_frozen: self.stage1_frozen,
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
            .ok_or_else(|| Error::Version(format!("not a vq-vae checkpoint: {}", ck.descriptor)))?;
        let d: Descriptor = serde_json::from_str(json).map_err(|e| Error::Version(format!("bad descriptor: {e}")))?;
        let mut model = Self::new(&d.config, d.leads, d.length, d.normalizer, ck.seed)?;
        if d.stage1_frozen {
            model.freeze_stage1();
        }
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

impl<S: Real> Generator for Vqvae<S> {
    fn name(&self) -> &str {
        "vqvae"
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

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VqvaeLog {
    pub stage1: Stage1Log,
    pub stage2: Vec<f64>,
    pub wall_time_s: f64,
}

/// Both training stages on `ds`.
pub fn train_vqvae(ds: &Dataset, config: &VqvaeConfig, seed: u64) -> Result<(Vqvae<f32>, VqvaeLog)> {
    let start = Instant::now();
    let (leads, length) = training_shape(ds)?;
    let normalizer = Normalizer::fit(ds)?;
    let (rows, labels) = normalized_rows(ds, &normalizer)?;
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let mut model: Vqvae<f32> = Vqvae::new(config, leads, length, normalizer, seed)?;
    let stage1 = model.train_stage1(&refs, rng::mix(seed, 1))?;
    model.freeze_stage1();
    let corpus = model.token_corpus(&refs, &labels)?;
    let stage2 = model.train_stage2(&corpus, rng::mix(seed, 2))?;
    Ok((
        model,
        VqvaeLog {
            stage1,
            stage2,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    ))
}
