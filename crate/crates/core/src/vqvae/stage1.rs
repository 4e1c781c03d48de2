use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::dsp::{frame_count, stft, IstftPlan};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, CustomOp, Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Lf,
    Hf,
}

impl BranchKind {
    pub fn tag(self) -> &'static str {
        match self {
            BranchKind::Lf => "lf",
            BranchKind::Hf => "hf",
        }
    }
}

/// Time-frequency layout shared by both branches.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub leads: usize,
    pub length: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub frames: usize,
    pub cutoff: usize,
    plan: Arc<IstftPlan>,
}

impl Geometry {
    pub fn new(leads: usize, length: usize, n_fft: usize, hop: usize, cutoff: usize) -> Result<Self> {
        let frames = frame_count(length, hop);
        let plan = IstftPlan::new(n_fft, hop, frames, length)?;
        let bins = n_fft / 2 + 1;
        if cutoff == 0 || cutoff >= bins {
            return Err(Error::InvalidArgument(format!("cutoff bin must lie in 1..{bins}, got {cutoff}")));
        }
        Ok(Self {
            leads,
            length,
            n_fft,
            hop,
            frames,
            cutoff,
            plan: Arc::new(plan),
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn branch_bins(&self, b: BranchKind) -> Range<usize> {
        match b {
            BranchKind::Lf => 0..self.cutoff,
            BranchKind::Hf => self.cutoff..self.bins(),
        }
    }

    /// Real and imaginary planes of the branch's bins for every lead.
    pub fn channels(&self, b: BranchKind) -> usize {
        self.leads * 2 * self.branch_bins(b).len()
    }

    /// Branch spectrogram planes of a lead-major series, each
    /// [channels × frames] with channel `(lead*2 + part) * n_bins + j`.
    pub fn spectral_planes(&self, row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if row.len() != self.leads * self.length {
            return Err(Error::shape("vq input", [self.leads * self.length], [row.len()]));
        }
        let mut lf = Vec::with_capacity(self.channels(BranchKind::Lf) * self.frames);
        let mut hf = Vec::with_capacity(self.channels(BranchKind::Hf) * self.frames);
        let specs: Vec<_> = row.chunks(self.length).map(|l| stft(l, self.n_fft, self.hop)).collect::<Result<_>>()?;
        for (b, out) in [(BranchKind::Lf, &mut lf), (BranchKind::Hf, &mut hf)] {
            for s in &specs {
                for part in [&s.re, &s.im] {
                    for k in self.branch_bins(b) {
                        out.extend_from_slice(&part[k * self.frames..(k + 1) * self.frames]);
                    }
                }
            }
        }
        Ok((lf, hf))
    }

    /// Time-domain series of one branch's planes, lead-major.
    pub fn synthesize(&self, b: BranchKind, planes: &[f64]) -> Vec<f64> {
        let range = self.branch_bins(b);
        let (nb, frames, bins) = (range.len(), self.frames, self.bins());
        let mut out = Vec::with_capacity(self.leads * self.length);
        for lead in 0..self.leads {
            let mut re = vec![0.0; bins * frames];
            let mut im = vec![0.0; bins * frames];
            for (part, dst) in [&mut re, &mut im].into_iter().enumerate() {
                for (j, k) in range.clone().enumerate() {
                    let src = ((lead * 2 + part) * nb + j) * frames;
                    dst[k * frames..(k + 1) * frames].copy_from_slice(&planes[src..src + frames]);
                }
            }
            out.extend(self.plan.synthesize(&re, &im));
        }
        out
    }

    fn synthesize_adjoint(&self, b: BranchKind, grad: &[f64]) -> Vec<f64> {
        let range = self.branch_bins(b);
        let (nb, frames) = (range.len(), self.frames);
        let mut out = vec![0.0; self.channels(b) * frames];
        for lead in 0..self.leads {
            let (gre, gim) = self.plan.adjoint(&grad[lead * self.length..(lead + 1) * self.length]);
            for (part, src) in [gre, gim].iter().enumerate() {
                for (j, k) in range.clone().enumerate() {
                    let dst = ((lead * 2 + part) * nb + j) * frames;
                    out[dst..dst + frames].copy_from_slice(&src[k * frames..(k + 1) * frames]);
                }
            }
        }
        out
    }
}

/// Inverse STFT of zero-padded branch planes: [B, channels, frames] to
/// [B, leads, length].
pub(crate) struct IstftOp {
    pub geometry: Geometry,
    pub branch: BranchKind,
}

impl<S: Real> CustomOp<S> for IstftOp {
    fn name(&self) -> &str {
        "istft"
    }

    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let x = inputs[0];
        let g = &self.geometry;
        let per = g.channels(self.branch) * g.frames;
        if x.shape().len() != 3 || x.dim(1) * x.dim(2) != per || x.dim(2) != g.frames {
            return Err(Error::shape("istft planes", [0, g.channels(self.branch), g.frames], x.shape()));
        }
        let b = x.dim(0);
        let mut out = Vec::with_capacity(b * g.leads * g.length);
        for row in x.data().chunks(per) {
            let planes: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            out.extend(g.synthesize(self.branch, &planes).into_iter().map(S::of));
        }
        Tensor::new(&[b, g.leads, g.length], out)
    }

    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        let g = &self.geometry;
        let per_out = g.leads * g.length;
        let mut out = Vec::with_capacity(inputs[0].numel());
        for row in grad.data().chunks(per_out) {
            let gr: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            out.extend(g.synthesize_adjoint(self.branch, &gr).into_iter().map(S::of));
        }
        vec![Some(Tensor::new(inputs[0].shape(), out).expect("shape"))]
    }
}

/// Encoder, decoder and codebook of one frequency branch.
#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub kind: BranchKind,
    enc_in: Conv1d,
    downs: Vec<Conv1d>,
    enc_out: Conv1d,
    dec_in: Conv1d,
    ups: Vec<Conv1d>,
    dec_out: Conv1d,
    pub codebook: ParamId,
    pub width: usize,
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        kind: BranchKind,
        channels: usize,
        hidden: usize,
        code_dim: usize,
        codebook_size: usize,
        rate: usize,
        frames: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !rate.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("downsampling rate {rate} must be a power of two")));
        }
        let levels = rate.trailing_zeros() as usize;
        let p = kind.tag();
        let enc_in = Conv1d::new(store, &format!("enc_{p}.in"), channels, hidden, 3, rng);
        let downs = (0..levels)
            .map(|i| Conv1d::new(store, &format!("enc_{p}.down{i}"), hidden, hidden, 3, rng).with_stride(2))
            .collect();
        let enc_out = Conv1d::new(store, &format!("enc_{p}.out"), hidden, code_dim, 1, rng);
        let dec_in = Conv1d::new(store, &format!("dec_{p}.in"), code_dim, hidden, 1, rng);
        let ups = (0..levels)
            .map(|i| Conv1d::new(store, &format!("dec_{p}.up{i}"), hidden, hidden, 3, rng))
            .collect();
        let dec_out = Conv1d::new(store, &format!("dec_{p}.out"), hidden, channels, 3, rng);
        let book = crate::rng::normals(rng, codebook_size * code_dim);
        let codebook = store.add_buffer(format!("codebook_{p}"), Tensor::from_f64(&[codebook_size, code_dim], &book)?);
        let mut width = frames;
        for _ in 0..levels {
            width = width.div_ceil(2);
        }
        if width < 3 {
            return Err(Error::shape("token grid width", [3], [width]));
        }
        Ok(Self {
            kind,
            enc_in,
            downs,
            enc_out,
            dec_in,
            ups,
            dec_out,
            codebook,
            width,
        })
    }

    /// [B, channels, frames] to latents [B, code_dim, width].
    pub fn encode<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let h = self.enc_in.forward(g, x)?;
        let mut h = g.relu(h);
        for d in &self.downs {
            let y = d.forward(g, h)?;
            h = g.relu(y);
        }
        self.enc_out.forward(g, h)
    }

    /// Latents [B, code_dim, width] to planes [B, channels, frames].
    pub fn decode<S: Real>(&self, g: &mut Graph<S>, z: Var, frames: usize) -> Result<Var> {
        let h = self.dec_in.forward(g, z)?;
        let mut h = g.relu(h);
        for u in &self.ups {
            let up = g.upsample_nearest(h, 2);
            let y = u.forward(g, up)?;
            h = g.relu(y);
        }
        let h = g.slice(h, 2, 0, frames)?;
        self.dec_out.forward(g, h)
    }
}
