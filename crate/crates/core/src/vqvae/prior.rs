use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Dense, Embedding, Graph, ParamId, ParamStore, Real, Tensor, TransformerBlock, Var};
use crate::rng;

/// A grid of code indices; `MASK` marks cells still to be predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<usize>,
}

impl TokenGrid {
    pub const MASK: usize = usize::MAX;

    pub fn masked(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![Self::MASK; h * w],
        }
    }

    pub fn mask_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == Self::MASK).count()
    }
}

/// Cosine masking with linear temperature annealing over `steps` rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSchedule {
    pub steps: usize,
    pub temp_start: f64,
    pub temp_end: f64,
}

impl MaskSchedule {
    pub fn new(steps: usize, temp_start: f64, temp_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("decode needs at least one round".into()));
        }
        if !(temp_start > 0.0 && temp_end > 0.0) {
            return Err(Error::InvalidArgument(format!("temperatures must be positive, got {temp_start} and {temp_end}")));
        }
        Ok(Self {
            steps,
            temp_start,
            temp_end,
        })
    }

    /// γ(r) = cos(πr/2).
    pub fn gamma(r: f64) -> f64 {
        (FRAC_PI_2 * r.clamp(0.0, 1.0)).cos()
    }

    /// Masks left after round `t` (1-based) out of `cells`. The final round
    /// always leaves none.
    pub fn remaining(&self, t: usize, cells: usize) -> usize {
        if t >= self.steps {
            return 0;
        }
        let m = (Self::gamma(t as f64 / self.steps as f64) * cells as f64).ceil() as usize;
        m.min(cells)
    }

    /// Sampling temperature of round `t` (1-based).
    pub fn temperature(&self, t: usize) -> f64 {
        if self.steps == 1 {
            return self.temp_start;
        }
        let f = (t.saturating_sub(1)) as f64 / (self.steps - 1) as f64;
        self.temp_start + (self.temp_end - self.temp_start) * f.min(1.0)
    }
}

/// Bidirectional transformer over `[class] + context + tokens` that
/// predicts a code at every token position.
#[derive(Debug, Clone)]
pub(crate) struct Prior {
    tokens: Embedding,
    context: Option<Embedding>,
    class: Embedding,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    head: Dense,
    pub n_ctx: usize,
    pub n_tok: usize,
    pub codes: usize,
    dim: usize,
}

pub(crate) struct PriorShape {
    pub codes: usize,
    pub n_classes: usize,
    pub n_ctx: usize,
    pub n_tok: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Prior {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, s: &PriorShape, r: &mut impl Rng) -> Result<Self> {
        let tokens = Embedding::new(store, &format!("{name}.tokens"), s.codes + 1, s.dim, r);
        let context = (s.n_ctx > 0).then(|| Embedding::new(store, &format!("{name}.context"), s.codes, s.dim, r));
        let class = Embedding::new(store, &format!("{name}.class"), s.n_classes, s.dim, r);
        let seq = 1 + s.n_ctx + s.n_tok;
        let pos_init: Vec<f64> = rng::normals(r, seq * s.dim).into_iter().map(|v| 0.1 * v).collect();
        let pos = store.add(format!("{name}.pos"), Tensor::from_f64(&[seq, s.dim], &pos_init)?);
        let blocks = (0..s.layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), s.dim, s.heads, s.hidden, s.dropout, r))
            .collect::<Result<_>>()?;
        let head = Dense::new(store, &format!("{name}.head"), s.dim, s.codes, r);
        for id in [head.w, head.b] {
            store.get_mut(id).value.fill(S::zero());
        }
        Ok(Self {
            tokens,
            context,
            class,
            pos,
            blocks,
            head,
            n_ctx: s.n_ctx,
            n_tok: s.n_tok,
            codes: s.codes,
            dim: s.dim,
        })
    }

    /// Logits [B·n_tok, K]. `tokens` holds `B·n_tok` entries where
    /// `TokenGrid::MASK` marks masked cells; `context` holds `B·n_ctx`.
    pub fn logits<S: Real>(&self, g: &mut Graph<S>, tokens: &[usize], context: &[usize], labels: &[usize]) -> Result<Var> {
        let b = labels.len();
        if tokens.len() != b * self.n_tok || context.len() != b * self.n_ctx {
            return Err(Error::shape("prior input", [b * self.n_tok, b * self.n_ctx], [tokens.len(), context.len()]));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| if t == TokenGrid::MASK { self.codes } else { t }).collect();
        let d = self.dim;
        let cls = self.class.forward(g, labels)?;
        let mut parts = vec![g.reshape(cls, &[b, 1, d])?];
        if let Some(ctx) = &self.context {
            let c = ctx.forward(g, context)?;
            parts.push(g.reshape(c, &[b, self.n_ctx, d])?);
        }
        let t = self.tokens.forward(g, &idx)?;
        parts.push(g.reshape(t, &[b, self.n_tok, d])?);
        let seq = 1 + self.n_ctx + self.n_tok;
        let x = g.concat(&parts, 1)?;
        let x = g.reshape(x, &[b, seq * d])?;
        let pos = g.param(self.pos);
        let pos = g.reshape(pos, &[seq * d])?;
        let x = g.add_bias(x, pos, 1)?;
        let mut h = g.reshape(x, &[b, seq, d])?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        let h = g.slice(h, 1, 1 + self.n_ctx, self.n_tok)?;
        let y = self.head.forward(g, h)?;
        g.reshape(y, &[b * self.n_tok, self.codes])
    }

    /// Cross-entropy over masked cells only. `masked` holds the clean
    /// targets; masked positions are those where `input` is MASK.
    pub fn masked_loss<S: Real>(
        &self,
        g: &mut Graph<S>,
        input: &[usize],
        targets: &[usize],
        context: &[usize],
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let logits = self.logits(g, input, context, labels)?;
        let weights: Vec<f64> = input.iter().map(|&t| if t == TokenGrid::MASK { 1.0 } else { 0.0 }).collect();
        let loss = g.cross_entropy_weighted(logits, targets, &weights)?;
        Ok((loss, logits))
    }
}

/// Masks `count` cells chosen uniformly at random.
pub(crate) fn mask_random(tokens: &[usize], count: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut out = tokens.to_vec();
    for &i in rng::permutation(r, tokens.len()).iter().take(count) {
        out[i] = TokenGrid::MASK;
    }
    out
}

/// Iterative parallel decoding from a fully masked grid. Each row of the
/// batch draws from its own stream, `streams[i]`.
pub(crate) fn iterative_decode<S: Real>(
    prior: &Prior,
    store: &ParamStore<S>,
    schedule: &MaskSchedule,
    context: &[usize],
    labels: &[usize],
    streams: &mut [impl Rng],
) -> Result<Vec<Vec<usize>>> {
    let (b, n, k) = (labels.len(), prior.n_tok, prior.codes);
    let mut grid = vec![TokenGrid::MASK; b * n];
    for t in 1..=schedule.steps {
        let probs = {
            let mut g = Graph::new(store, false, 0);
            let logits = prior.logits(&mut g, &grid, context, labels)?;
            g.value(logits).to_f64()
        };
        let temp = schedule.temperature(t);
        let keep_masked = schedule.remaining(t, n);
        for (row, r) in streams.iter_mut().enumerate().take(b) {
            let cells = &mut grid[row * n..(row + 1) * n];
            let mut picks: Vec<(usize, usize, f64)> = Vec::new();
            for (i, cell) in cells.iter().enumerate() {
                if *cell != TokenGrid::MASK {
                    continue;
                }
                let l = &probs[(row * n + i) * k..(row * n + i + 1) * k];
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = l.iter().map(|v| ((v - m) / temp).exp()).collect();
                let z: f64 = w.iter().sum();
                if !z.is_finite() {
                    return Err(Error::Numeric(format!("non-finite token distribution at decode round {t}")));
                }
                let u = r.random::<f64>() * z;
                let mut acc = 0.0;
                let mut code = k - 1;
                for (c, wc) in w.iter().enumerate() {
                    acc += wc;
                    if u < acc {
                        code = c;
                        break;
                    }
                }
                picks.push((i, code, w[code] / z));
            }
            let unmask = picks.len().saturating_sub(keep_masked);
            picks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(i, code, _) in picks.iter().take(unmask) {
                cells[i] = code;
            }
        }
    }
    Ok(grid.chunks(n).map(<[usize]>::to_vec).collect())
}
