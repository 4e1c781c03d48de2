use rand::Rng;

use super::decomp::{PolyProjector, SeasonalOp};
use super::{BackboneKind, DdpmConfig, Denoiser};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Dense, Embedding, Graph, ParamStore, Real, Tensor, Var};

/// Sinusoidal features of the diffusion step, [B, dim].
pub fn step_features<S: Real>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for j in 0..half {
            let w = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let a = step as f64 * w;
            data.push(S::of(a.sin()));
            data.push(S::of(a.cos()));
        }
        if dim % 2 == 1 {
            data.push(S::zero());
        }
    }
    Tensor::new(&[t.len(), dim], data).expect("shape")
}

fn swish<S: Real>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.sigmoid(x);
    g.mul(x, s)
}

fn zero_init<S: Real>(store: &mut ParamStore<S>, conv: &Conv1d) {
    store.get_mut(conv.w).value.fill(S::zero());
    store.get_mut(conv.b).value.fill(S::zero());
}

/// Shared label table plus the diffusion-step MLP.
#[derive(Debug, Clone)]
pub(crate) struct Conditioner {
    label: Embedding,
    t1: Dense,
    t2: Dense,
    d_time: usize,
}

pub(crate) struct Conditioning {
    /// [B, d_time]
    pub step: Var,
    /// [B, d_label]
    pub label: Var,
}

impl Conditioner {
    fn new<S: Real>(store: &mut ParamStore<S>, cfg: &DdpmConfig, rng: &mut impl Rng) -> Self {
        Self {
            label: Embedding::new(store, "label", cfg.n_classes, cfg.d_label, rng),
            t1: Dense::new(store, "step.0", cfg.d_time, cfg.d_time, rng),
            t2: Dense::new(store, "step.1", cfg.d_time, cfg.d_time, rng),
            d_time: cfg.d_time,
        }
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, t: &[usize], labels: &[usize]) -> Result<Conditioning> {
        let f = g.input(step_features(t, self.d_time));
        let h = self.t1.forward(g, f)?;
        let h = swish(g, h)?;
        let h = self.t2.forward(g, h)?;
        let step = swish(g, h)?;
        let label = self.label.forward(g, labels)?;
        Ok(Conditioning { step, label })
    }
}

/// Gated residual layer: step bias before the dilated conv, label bias
/// after it, split into residual and skip paths.
#[derive(Debug, Clone)]
struct GatedLayer {
    step: Dense,
    label: Dense,
    conv: Conv1d,
    out: Conv1d,
    channels: usize,
}

impl GatedLayer {
    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, c: &Conditioning) -> Result<(Var, Var)> {
        let ch = self.channels;
        let sb = self.step.forward(g, c.step)?;
        let h = g.add_prefix(x, sb)?;
        let y = self.conv.forward(g, h)?;
        let lb = self.label.forward(g, c.label)?;
        let y = g.add_prefix(y, lb)?;
        let filt = g.slice(y, 1, 0, ch)?;
        let gate = g.slice(y, 1, ch, ch)?;
        let filt = g.tanh(filt);
        let gate = g.sigmoid(gate);
        let z = g.mul(filt, gate)?;
        let o = self.out.forward(g, z)?;
        let res = g.slice(o, 1, 0, ch)?;
        let skip = g.slice(o, 1, ch, ch)?;
        let r = g.add(x, res)?;
        Ok((g.scale(r, std::f64::consts::FRAC_1_SQRT_2), skip))
    }
}

/// Stack of dilated gated layers with dilation doubling per layer.
#[derive(Debug, Clone)]
pub(crate) struct Dilated {
    cond: Conditioner,
    input: Conv1d,
    layers: Vec<GatedLayer>,
    skip: Conv1d,
    output: Conv1d,
}

impl Dilated {
    fn new<S: Real>(store: &mut ParamStore<S>, cfg: &DdpmConfig, leads: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let cond = Conditioner::new(store, cfg, rng);
        let input = Conv1d::new(store, "input", leads, c, 1, rng);
        let layers = (0..cfg.layers)
            .map(|i| GatedLayer {
                step: Dense::new(store, &format!("layer{i}.step"), cfg.d_time, c, rng),
                label: Dense::new(store, &format!("layer{i}.label"), cfg.d_label, 2 * c, rng),
                conv: Conv1d::new(store, &format!("layer{i}.conv"), c, 2 * c, cfg.kernel, rng).with_dilation(1 << i.min(12)),
                out: Conv1d::new(store, &format!("layer{i}.out"), c, 2 * c, 1, rng),
                channels: c,
            })
            .collect();
        let skip = Conv1d::new(store, "skip", c, c, 1, rng);
        let output = Conv1d::new(store, "output", c, leads, 1, rng);
        zero_init(store, &output);
        Self {
            cond,
            input,
            layers,
            skip,
            output,
        }
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, t: &[usize], labels: &[usize]) -> Result<Var> {
        let c = self.cond.forward(g, t, labels)?;
        let h = self.input.forward(g, x)?;
        let mut h = g.relu(h);
        let mut skip_sum: Option<Var> = None;
        for layer in &self.layers {
            let (r, s) = layer.forward(g, h, &c)?;
            h = r;
            skip_sum = Some(match skip_sum {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let s = skip_sum.unwrap_or(h);
        let s = g.scale(s, 1.0 / (self.layers.len().max(1) as f64).sqrt());
        let s = g.relu(s);
        let s = self.skip.forward(g, s)?;
        let s = g.relu(s);
        self.output.forward(g, s)
    }
}

/// Two-conv residual block with step and label biases between the convs.
#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv1d,
    c2: Conv1d,
    step: Dense,
    label: Dense,
}

impl ResBlock {
    fn new<S: Real>(store: &mut ParamStore<S>, name: &str, ch: usize, cfg: &DdpmConfig, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv1d::new(store, &format!("{name}.c1"), ch, ch, cfg.kernel, rng),
            c2: Conv1d::new(store, &format!("{name}.c2"), ch, ch, cfg.kernel, rng),
            step: Dense::new(store, &format!("{name}.step"), cfg.d_time, ch, rng),
            label: Dense::new(store, &format!("{name}.label"), cfg.d_label, ch, rng),
        }
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, c: &Conditioning) -> Result<Var> {
        let h = self.c1.forward(g, x)?;
        let h = swish(g, h)?;
        let sb = self.step.forward(g, c.step)?;
        let h = g.add_prefix(h, sb)?;
        let lb = self.label.forward(g, c.label)?;
        let h = g.add_prefix(h, lb)?;
        let h = self.c2.forward(g, h)?;
        let y = g.add(x, h)?;
        swish(g, y)
    }
}

/// 1-D U-Net: stride-2 downsampling, nearest upsampling, skip concatenation.
#[derive(Debug, Clone)]
pub(crate) struct UNet {
    cond: Conditioner,
    input: Conv1d,
    enc: Vec<ResBlock>,
    down: Vec<Conv1d>,
    mid: ResBlock,
    merge: Vec<Conv1d>,
    dec: Vec<ResBlock>,
    output: Conv1d,
}

impl UNet {
    fn width(cfg: &DdpmConfig, level: usize) -> usize {
        cfg.channels << level.min(1)
    }

    fn new<S: Real>(store: &mut ParamStore<S>, cfg: &DdpmConfig, leads: usize, rng: &mut impl Rng) -> Self {
        let levels = cfg.layers.max(1);
        let cond = Conditioner::new(store, cfg, rng);
        let input = Conv1d::new(store, "input", leads, cfg.channels, cfg.kernel, rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..levels - 1 {
            let (w, next) = (Self::width(cfg, i), Self::width(cfg, i + 1));
            enc.push(ResBlock::new(store, &format!("enc{i}"), w, cfg, rng));
            down.push(Conv1d::new(store, &format!("down{i}"), w, next, 3, rng).with_stride(2));
        }
        let mid = ResBlock::new(store, "mid", Self::width(cfg, levels - 1), cfg, rng);
        let mut merge = Vec::new();
        let mut dec = Vec::new();
        for i in 0..levels - 1 {
            let (w, below) = (Self::width(cfg, i), Self::width(cfg, i + 1));
            merge.push(Conv1d::new(store, &format!("merge{i}"), w + below, w, 1, rng));
            dec.push(ResBlock::new(store, &format!("dec{i}"), w, cfg, rng));
        }
        let output = Conv1d::new(store, "output", cfg.channels, leads, 1, rng);
        zero_init(store, &output);
        Self {
            cond,
            input,
            enc,
            down,
            mid,
            merge,
            dec,
            output,
        }
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, t: &[usize], labels: &[usize]) -> Result<Var> {
        let c = self.cond.forward(g, t, labels)?;
        let mut h = self.input.forward(g, x)?;
        let mut skips = Vec::new();
        for (block, down) in self.enc.iter().zip(&self.down) {
            h = block.forward(g, h, &c)?;
            skips.push(h);
            h = down.forward(g, h)?;
        }
        h = self.mid.forward(g, h, &c)?;
        for i in (0..self.dec.len()).rev() {
            let skip = skips[i];
            let len = g.shape(skip)[2];
            let up = g.upsample_nearest(h, 2);
            let up = g.slice(up, 2, 0, len)?;
            let cat = g.concat(&[skip, up], 1)?;
            h = self.merge[i].forward(g, cat)?;
            h = self.dec[i].forward(g, h, &c)?;
        }
        self.output.forward(g, h)
    }
}

#[derive(Debug, Clone)]
struct DecompBlock {
    res: ResBlock,
    trend: Conv1d,
    season: Conv1d,
}

/// Interpretable backbone estimating `x̂0` as polynomial trend plus
/// per-block top-harmonic seasonality plus residual, converted to a noise
/// prediction through the forward marginal.
#[derive(Debug, Clone)]
pub(crate) struct Decomposer {
    cond: Conditioner,
    input: Conv1d,
    blocks: Vec<DecompBlock>,
    residual: Conv1d,
    poly: PolyProjector,
    harmonics: usize,
    alpha_bars: Vec<f64>,
}

/// Graph handles of a decomposition estimate, each [B, leads, L].
pub struct DecompositionVars {
    pub trend: Var,
    pub seasonal: Vec<Var>,
    pub residual: Var,
    pub x0: Var,
}

impl Decomposer {
    fn new<S: Real>(store: &mut ParamStore<S>, cfg: &DdpmConfig, leads: usize, length: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let cond = Conditioner::new(store, cfg, rng);
        let input = Conv1d::new(store, "input", leads, c, cfg.kernel, rng);
        let blocks = (0..cfg.layers)
            .map(|i| DecompBlock {
                res: ResBlock::new(store, &format!("block{i}"), c, cfg, rng),
                trend: Conv1d::new(store, &format!("block{i}.trend"), c, leads, 1, rng),
                season: Conv1d::new(store, &format!("block{i}.season"), c, leads, 1, rng),
            })
            .collect();
        let residual = Conv1d::new(store, "residual", c, leads, 1, rng);
        let schedule = cfg.schedule()?;
        Ok(Self {
            cond,
            input,
            blocks,
            residual,
            poly: PolyProjector::new(length, cfg.poly_degree)?,
            harmonics: cfg.harmonics,
            alpha_bars: schedule.alpha_bars().to_vec(),
        })
    }

    pub(crate) fn decompose<S: Real>(&self, g: &mut Graph<S>, x: Var, t: &[usize], labels: &[usize]) -> Result<DecompositionVars> {
        let c = self.cond.forward(g, t, labels)?;
        let (q, qt) = self.poly.tensors::<S>();
        let (q, qt) = (g.input(q), g.input(qt));
        let mut h = self.input.forward(g, x)?;
        let mut trend_in: Option<Var> = None;
        let mut seasonal = Vec::new();
        for b in &self.blocks {
            h = b.res.forward(g, h, &c)?;
            let tr = b.trend.forward(g, h)?;
            trend_in = Some(match trend_in {
                Some(acc) => g.add(acc, tr)?,
                None => tr,
            });
            let s = b.season.forward(g, h)?;
            seasonal.push(g.custom(&[s], Box::new(SeasonalOp { harmonics: self.harmonics }))?);
        }
        let residual = self.residual.forward(g, h)?;
        // Projection is linear, so projecting the summed trend inputs equals
        // summing per-block projections.
        let trend = match trend_in {
            Some(tr) => {
                let coef = g.matmul(tr, q)?;
                g.matmul(coef, qt)?
            }
            None => g.scale(residual, 0.0),
        };
        let mut x0 = g.add(trend, residual)?;
        for &s in &seasonal {
            x0 = g.add(x0, s)?;
        }
        Ok(DecompositionVars {
            trend,
            seasonal,
            residual,
            x0,
        })
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, t: &[usize], labels: &[usize]) -> Result<Var> {
        let d = self.decompose(g, x, t, labels)?;
        let shape = g.shape(x).to_vec();
        let per = shape[1..].iter().product::<usize>();
        let mut a = Vec::with_capacity(shape[0] * per);
        let mut b = Vec::with_capacity(shape[0] * per);
        for &step in t {
            let ab = if step == 0 { 1.0 } else { self.alpha_bars[step - 1] };
            let s = (1.0 - ab).sqrt().max(1e-12);
            a.extend(std::iter::repeat_n(S::of(1.0 / s), per));
            b.extend(std::iter::repeat_n(S::of(ab.sqrt() / s), per));
        }
        let a = g.input(Tensor::new(&shape, a)?);
        let b = g.input(Tensor::new(&shape, b)?);
        let xa = g.mul(x, a)?;
        let xb = g.mul(d.x0, b)?;
        g.sub(xa, xb)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Backbone {
    Dilated(Dilated),
    UNet(UNet),
    Decomposition(Decomposer),
}

impl Backbone {
    pub(crate) fn new<S: Real>(
        store: &mut ParamStore<S>,
        cfg: &DdpmConfig,
        leads: usize,
        length: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match cfg.backbone {
            BackboneKind::Dilated => Backbone::Dilated(Dilated::new(store, cfg, leads, rng)),
            BackboneKind::Unet => {
                let min_len = 1usize << cfg.layers.saturating_sub(1);
                if length < min_len.max(cfg.kernel) {
                    return Err(Error::shape("unet input length", [min_len.max(cfg.kernel)], [length]));
                }
                Backbone::UNet(UNet::new(store, cfg, leads, rng))
            }
            BackboneKind::Decomposition => Backbone::Decomposition(Decomposer::new(store, cfg, leads, length, rng)?),
        })
    }
}

impl<S: Real> Denoiser<S> for Backbone {
    fn predict_noise(&self, g: &mut Graph<S>, x_t: Var, t: &[usize], labels: &[usize]) -> Result<Var> {
        match self {
            Backbone::Dilated(m) => m.forward(g, x_t, t, labels),
            Backbone::UNet(m) => m.forward(g, x_t, t, labels),
            Backbone::Decomposition(m) => m.forward(g, x_t, t, labels),
        }
    }
}
