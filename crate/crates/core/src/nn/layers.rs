use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Affine map over the last axis: `y = x W + b`, `W` is [in, out].
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[input, output], bound, rng);
        let b = store.add_uniform(format!("{name}.b"), &[output], bound, rng);
        Self { w, b, input, output }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        let axis = g.shape(y).len() - 1;
        g.add_bias(y, b, axis)
    }
}

/// Convolution over [B, C, L] inputs.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[out_ch, in_ch, kernel], bound, rng);
        let b = store.add_uniform(format!("{name}.b"), &[out_ch], bound, rng);
        Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Total zero padding that keeps the length unchanged at stride 1.
    pub fn same_padding(&self) -> (usize, usize) {
        let total = self.dilation * (self.kernel - 1);
        (total / 2, total - total / 2)
    }

    /// Length-preserving at stride 1; with stride `s` the output has
    /// `ceil(L / s)` samples.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let (pl, pr) = self.same_padding();
        let l = g.shape(x).get(2).copied().unwrap_or(0);
        if l < self.kernel {
            return Err(Error::shape("conv1d input length", [self.kernel], [l]));
        }
        let pr = if self.stride > 1 {
            let lout = l.div_ceil(self.stride);
            let need = (lout - 1) * self.stride + self.dilation * (self.kernel - 1) + 1;
            need.saturating_sub(l + pl)
        } else {
            pr
        };
        self.forward_padded(g, x, pl, pr)
    }

    pub fn forward_padded<S: Real>(&self, g: &mut Graph<S>, x: Var, pad_l: usize, pad_r: usize) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.conv1d(x, w, self.stride, self.dilation, pad_l, pad_r)?;
        g.add_bias(y, b, 1)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Lookup table of learned vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, count: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..count * dim).map(|_| S::of(crate::rng::normal(rng))).collect();
        let table = store.add(format!("{name}.table"), Tensor::new(&[count, dim], data).expect("shape"));
        Self { table, count, dim }
    }

    /// Returns [idx.len(), dim].
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, idx: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding(t, idx)
    }
}

/// Bidirectional (unmasked) multi-head self-attention over [B, L, D].
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Dense::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Dense::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Dense::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Dense::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    fn split_heads<S: Real>(&self, g: &mut Graph<S>, x: Var, b: usize, l: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, l, dh])
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape("attention", [0, 0, self.dim], &s));
        }
        let (b, l) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let q = self.split_heads(g, q, b, l)?;
        let k = self.split_heads(g, k, b, l)?;
        let v = self.split_heads(g, v, b, l)?;
        let kt = g.transpose_last2(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_last(scores);
        let ctx = g.bmm(att, v)?;
        let ctx = g.reshape(ctx, &[b, self.heads, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, self.dim])?;
        self.o.forward(g, ctx)
    }
}

/// Post-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Dense::new(store, &format!("{name}.ff1"), dim, hidden, rng),
            ff2: Dense::new(store, &format!("{name}.ff2"), hidden, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            dropout,
        })
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x)?;
        let a = g.dropout(a, self.dropout);
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ff1.forward(g, h)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, f)?;
        let f = g.dropout(f, self.dropout);
        let y = g.add(h, f)?;
        self.norm2.forward(g, y)
    }
}
