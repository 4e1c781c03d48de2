use std::collections::HashMap;

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Differentiable operation defined outside the built-in vocabulary.
pub trait CustomOp<S: Real> {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>>;
    /// Gradient with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>>;
}

enum Op<'a, S: Real> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var, axis: usize },
    AddPrefix { x: Var, e: Var },
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Conv1d { x: Var, w: Var, stride: usize, dilation: usize, pad_l: usize },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Dropout { x: Var, mask: Vec<S> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Mse(Var, Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S> + 'a> },
}

struct Node<'a, S: Real> {
    value: Tensor<S>,
    op: Op<'a, S>,
    requires_grad: bool,
}

/// Reverse-mode tape. Forward values are computed eagerly as ops are
/// recorded; [`Graph::backward`] walks the tape once in reverse.
pub struct Graph<'a, S: Real> {
    store: &'a ParamStore<S>,
    nodes: Vec<Node<'a, S>>,
    param_nodes: HashMap<ParamId, Var>,
    train: bool,
    rng: StreamRng,
}

/// Gradients produced by one backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Real> Gradients<S> {
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<'a, S: Real> Graph<'a, S> {
    /// `train` enables dropout; `seed` drives dropout masks.
    pub fn new(store: &'a ParamStore<S>, train: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            train,
            rng: rng::stream(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<'a, S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: Var, op: &str) -> Result<Var> {
        if self.value(v).is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("non-finite output from {op}")))
        }
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is retained by [`Graph::backward`].
    pub fn input_grad(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.param_nodes.insert(id, v);
        v
    }

    fn binary_same(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a 1-D tensor `b` along `axis` of `x`, broadcasting over the rest.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(b) != [xs[axis]] {
            return Err(Error::shape("add_bias", [xs.get(axis).copied().unwrap_or(0)], self.shape(b)));
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for (j, &bj) in bv.iter().enumerate() {
                let base = (o * n + j) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v += bj);
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias { x, b, axis }, rg))
    }

    /// Adds `e`, whose shape is a prefix of `x`'s, broadcasting over the
    /// trailing axes of `x` (per-sample, per-channel biases).
    pub fn add_prefix(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if es.len() > xs.len() || xs[..es.len()] != es[..] {
            return Err(Error::shape("add_prefix", &xs[..es.len().min(xs.len())], &es));
        }
        let inner: usize = xs[es.len()..].iter().product();
        let ev = self.value(e).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, &bias) in out.data_mut().chunks_mut(inner).zip(&ev) {
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(x) || self.rg(e);
        Ok(self.push(out, Op::AddPrefix { x, e }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::of(c);
        let t = self.map(x, |v| v * cs);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `a` of shape [..., K] times `b` of shape [K, N].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let k = last_dim(&ash);
        if bsh.len() != 2 || bsh[0] != k {
            return Err(Error::shape("matmul", [k, bsh.last().copied().unwrap_or(0)], &bsh));
        }
        let n = bsh[1];
        let rows = self.value(a).numel() / k.max(1);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for (kk, &aval) in av[r * k..(r + 1) * k].iter().enumerate() {
                if aval == S::zero() {
                    continue;
                }
                for (o, &bval) in orow.iter_mut().zip(&bv[kk * n..(kk + 1) * n]) {
                    *o += aval * bval;
                }
            }
        }
        let mut shape = ash.clone();
        *shape.last_mut().expect("non-empty") = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product: [B, M, K] x [B, K, N] -> [B, M, N].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::shape("bmm", [ash.first().copied().unwrap_or(0), ash.get(2).copied().unwrap_or(0)], &bsh[..bsh.len().min(2)]));
        }
        let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); bs * m * n];
        for bi in 0..bs {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let orow = &mut ob[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aval = ab[i * k + kk];
                    for (o, &bval) in orow.iter_mut().zip(&bb[kk * n..(kk + 1) * n]) {
                        *o += aval * bval;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &xs, perm));
        }
        let out = permute_tensor(self.value(x), perm);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose_last2", [0, 0], self.shape(x)));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// 1-D convolution. `x` is [B, Cin, L], `w` is [Cout, Cin, K]; the input
    /// is implicitly zero padded by `pad_l`/`pad_r` samples.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, pad_l: usize, pad_r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::shape("conv1d", [xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0), 0], &xs));
        }
        let (b, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let span = dilation * (k - 1) + 1;
        if stride == 0 || l + pad_l + pad_r < span {
            return Err(Error::shape("conv1d", [b, cin, span], &xs));
        }
        let lout = (l + pad_l + pad_r - span) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![S::zero(); b * cout * lout];
        for bi in 0..b {
            for co in 0..cout {
                let orow = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                for ci in 0..cin {
                    let xrow = &xv[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for kk in 0..k {
                        let wval = wv[(co * cin + ci) * k + kk];
                        let off = (kk * dilation) as isize - pad_l as isize;
                        let (t0, t1) = valid_range(off, stride, l, lout);
                        if stride == 1 {
                            let s0 = (t0 as isize + off) as usize;
                            for (o, &xval) in orow[t0..t1].iter_mut().zip(&xrow[s0..s0 + (t1 - t0)]) {
                                *o += wval * xval;
                            }
                        } else {
                            for t in t0..t1 {
                                orow[t] += wval * xrow[(t as isize * stride as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(&[b, cout, lout], out)?,
            Op::Conv1d {
                x,
                w,
                stride,
                dilation,
                pad_l,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(S::zero()));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.tanh());
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| S::one() / (S::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.exp());
        let rg = self.rg(x);
        let v = self.push(t, Op::Exp(x), rg);
        self.check_finite(v, "exp")
    }

    /// Softmax over the last axis, computed in shifted form.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = last_dim(t.shape());
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxLast(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", [d], self.shape(gamma)));
        }
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v.f64() - mean) * inv;
                xhat.push(h);
                out.push(S::of(h * gv[j].f64() + bv[j].f64()));
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: `table` [V, D], returns [idx.len(), D].
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", [0, 0], &ts));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Index { index: bad, bound: v });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, [axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape("slice", [start + len], &xs));
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = S::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<S> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Non-overlapping max pooling over the last axis; a trailing remainder
    /// shorter than `k` is dropped.
    pub fn max_pool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        if k <= 1 {
            return Ok(x);
        }
        let xs = self.shape(x).to_vec();
        let l = last_dim(&xs);
        if l < k {
            return Err(Error::shape("max_pool1d", [k], &xs));
        }
        let lo = l / k;
        let d = self.value(x).data();
        let rows = d.len() / l;
        let mut out = Vec::with_capacity(rows * lo);
        let mut argmax = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for t in 0..lo {
                let base = r * l + t * k;
                let mut best = base;
                for i in base + 1..base + k {
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = lo;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling of the last axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        if factor <= 1 {
            return x;
        }
        let xs = self.shape(x).to_vec();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len() * factor);
        for &v in d {
            out.extend(std::iter::repeat_n(v, factor));
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") *= factor;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out).expect("shape"), Op::Upsample { x, factor }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.f64()).sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sums over the last axis, removing it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = last_dim(&xs);
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|c| S::of(c.iter().map(|v| v.f64()).sum()))
            .collect();
        let shape = if xs.len() > 1 { xs[..xs.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out).expect("shape"), Op::SumLast(x), rg)
    }

    /// Mean softmax cross-entropy of `logits` [N, C] against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_weighted(logits, targets, &vec![1.0; targets.len()])
    }

    /// Weighted cross-entropy `Σ w_i ce_i / Σ w_i`; zero when all weights are 0.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let c = last_dim(&ls);
        let n = self.value(logits).numel() / c;
        if n != targets.len() || n != weights.len() {
            return Err(Error::shape("cross_entropy", [n], [targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: bad, bound: c });
        }
        let lv = self.value(logits).data();
        let wsum: f64 = weights.iter().sum();
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (i, row) in lv.chunks(c).enumerate() {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.f64() - m).exp()).sum();
            let lse = m + z.ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]].f64());
            }
            probs.extend(row.iter().map(|v| (v.f64() - lse).exp()));
        }
        let loss = if wsum > 0.0 { loss / wsum } else { 0.0 };
        let rg = self.rg(logits);
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        );
        self.check_finite(v, "cross_entropy")
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x.f64() - y.f64()).powi(2))
            .sum::<f64>()
            / ta.numel().max(1) as f64;
        let rg = self.rg(a) || self.rg(b);
        let v = self.push(Tensor::scalar(s), Op::Mse(a, b), rg);
        self.check_finite(v, "mse")
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<S> + 'a>) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Backpropagates from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&pid, &v)| (pid, v.0))
            .collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Like `acc` but builds the gradient lazily only when needed.
    fn acc_with(&self, grads: &mut [Option<Tensor<S>>], v: Var, f: impl FnOnce() -> Tensor<S>) {
        if self.rg(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<S>| Tensor::new(self.value(v).shape(), data).expect("shape");
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *b, || like(*b, gd.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, || like(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                self.acc_with(grads, *b, || like(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::AddBias { x, b, axis } => {
                self.acc(grads, *x, g.clone());
                self.acc_with(grads, *b, || {
                    let (outer, n, inner) = split_at_axis(out.shape(), *axis);
                    let mut db = vec![0.0f64; n];
                    for o in 0..outer {
                        for (j, d) in db.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *d += gd[base..base + inner].iter().map(|v| v.f64()).sum::<f64>();
                        }
                    }
                    like(*b, db.into_iter().map(S::of).collect())
                });
            }
            Op::AddPrefix { x, e } => {
                self.acc(grads, *x, g.clone());
                self.acc_with(grads, *e, || {
                    let n = self.value(*e).numel();
                    let inner = gd.len() / n;
                    like(*e, gd.chunks(inner).map(|c| S::of(c.iter().map(|v| v.f64()).sum())).collect())
                });
            }
            Op::Scale(x, c) => {
                let cs = S::of(*c);
                self.acc_with(grads, *x, || like(*x, gd.iter().map(|&v| v * cs).collect()));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.dim(0), tb.dim(1));
                let rows = ta.numel() / k.max(1);
                let (av, bv) = (ta.data(), tb.data());
                self.acc_with(grads, *a, || {
                    let mut da = vec![S::zero(); rows * k];
                    for r in 0..rows {
                        let grow = &gd[r * n..(r + 1) * n];
                        for kk in 0..k {
                            da[r * k + kk] = dot(grow, &bv[kk * n..(kk + 1) * n]);
                        }
                    }
                    like(*a, da)
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![S::zero(); k * n];
                    for r in 0..rows {
                        let grow = &gd[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let aval = av[r * k + kk];
                            if aval == S::zero() {
                                continue;
                            }
                            for (d, &gv) in db[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *d += aval * gv;
                            }
                        }
                    }
                    like(*b, db)
                });
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.dim(0), ta.dim(1), ta.dim(2), tb.dim(2));
                let (av, bv) = (ta.data(), tb.data());
                self.acc_with(grads, *a, || {
                    let mut da = vec![S::zero(); bs * m * k];
                    for bi in 0..bs {
                        for i in 0..m {
                            let grow = &gd[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for kk in 0..k {
                                let brow = &bv[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                                da[(bi * m + i) * k + kk] = dot(grow, brow);
                            }
                        }
                    }
                    like(*a, da)
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![S::zero(); bs * k * n];
                    for bi in 0..bs {
                        for i in 0..m {
                            let grow = &gd[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for kk in 0..k {
                                let aval = av[(bi * m + i) * k + kk];
                                for (d, &gv) in db[(bi * k + kk) * n..(bi * k + kk + 1) * n].iter_mut().zip(grow) {
                                    *d += aval * gv;
                                }
                            }
                        }
                    }
                    like(*b, db)
                });
            }
            Op::Permute { x, perm } => {
                self.acc_with(grads, *x, || {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    permute_tensor(g, &inv)
                });
            }
            Op::Reshape(x) => {
                self.acc_with(grads, *x, || like(*x, gd.to_vec()));
            }
            Op::Conv1d {
                x,
                w,
                stride,
                dilation,
                pad_l,
            } => self.conv1d_backward(*x, *w, *stride, *dilation, *pad_l, g, grads),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, || {
                    like(*x, gd.iter().zip(xv).map(|(&g, &v)| if v > S::zero() { g } else { S::zero() }).collect())
                });
            }
            Op::Tanh(x) => {
                let yv = out.data();
                self.acc_with(grads, *x, || like(*x, gd.iter().zip(yv).map(|(&g, &y)| g * (S::one() - y * y)).collect()));
            }
            Op::Sigmoid(x) => {
                let yv = out.data();
                self.acc_with(grads, *x, || like(*x, gd.iter().zip(yv).map(|(&g, &y)| g * y * (S::one() - y)).collect()));
            }
            Op::Exp(x) => {
                let yv = out.data();
                self.acc_with(grads, *x, || like(*x, gd.iter().zip(yv).map(|(&g, &y)| g * y).collect()));
            }
            Op::SoftmaxLast(x) => {
                self.acc_with(grads, *x, || {
                    let d = last_dim(out.shape());
                    let mut dx = Vec::with_capacity(gd.len());
                    for (yr, gr) in out.data().chunks(d).zip(gd.chunks(d)) {
                        let s: f64 = yr.iter().zip(gr).map(|(y, g)| y.f64() * g.f64()).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&y, &g)| S::of(y.f64() * (g.f64() - s))));
                    }
                    like(*x, dx)
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = last_dim(out.shape());
                let gam = self.value(*gamma).data();
                self.acc_with(grads, *x, || {
                    let mut dx = Vec::with_capacity(gd.len());
                    for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, ga)| g.f64() * ga.f64()).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let c = inv_std[r] / d as f64;
                        dx.extend(dh.iter().zip(hr).map(|(&a, &h)| S::of(c * (d as f64 * a - s1 - h * s2))));
                    }
                    like(*x, dx)
                });
                self.acc_with(grads, *gamma, || {
                    let mut dg = vec![0.0f64; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j].f64() * hr[j];
                        }
                    }
                    like(*gamma, dg.into_iter().map(S::of).collect())
                });
                self.acc_with(grads, *beta, || {
                    let mut db = vec![0.0f64; d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j].f64();
                        }
                    }
                    like(*beta, db.into_iter().map(S::of).collect())
                });
            }
            Op::Embedding { table, idx } => {
                self.acc_with(grads, *table, || {
                    let d = self.value(*table).dim(1);
                    let mut dt = vec![S::zero(); self.value(*table).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += gd[r * d + j];
                        }
                    }
                    like(*table, dt)
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    self.acc_with(grads, v, || {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        like(v, d)
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                self.acc_with(grads, *x, || {
                    let xs = self.shape(*x);
                    let (outer, n, inner) = split_at_axis(xs, *axis);
                    let len = out.shape()[*axis];
                    let mut d = vec![S::zero(); outer * n * inner];
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    like(*x, d)
                });
            }
            Op::Dropout { x, mask } => {
                self.acc_with(grads, *x, || like(*x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::MaxPool { x, argmax } => {
                self.acc_with(grads, *x, || {
                    let mut d = vec![S::zero(); self.value(*x).numel()];
                    for (&i, &gv) in argmax.iter().zip(gd) {
                        d[i] += gv;
                    }
                    like(*x, d)
                });
            }
            Op::Upsample { x, factor } => {
                self.acc_with(grads, *x, || like(*x, gd.chunks(*factor).map(|c| c.iter().copied().sum()).collect()));
            }
            Op::SumAll(x) => {
                let s = gd[0];
                self.acc_with(grads, *x, || like(*x, vec![s; self.value(*x).numel()]));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel().max(1);
                let s = S::of(gd[0].f64() / n as f64);
                self.acc_with(grads, *x, || like(*x, vec![s; n]));
            }
            Op::SumLast(x) => {
                self.acc_with(grads, *x, || {
                    let d = last_dim(self.shape(*x));
                    let mut dx = Vec::with_capacity(gd.len() * d);
                    for &gv in gd {
                        dx.extend(std::iter::repeat_n(gv, d));
                    }
                    like(*x, dx)
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                self.acc_with(grads, *logits, || {
                    let c = last_dim(self.shape(*logits));
                    let wsum: f64 = weights.iter().sum();
                    let scale = if wsum > 0.0 { gd[0].f64() / wsum } else { 0.0 };
                    let mut d = Vec::with_capacity(probs.len());
                    for (i, row) in probs.chunks(c).enumerate() {
                        let w = weights[i] * scale;
                        d.extend(row.iter().enumerate().map(|(j, &p)| {
                            let y = if j == targets[i] { 1.0 } else { 0.0 };
                            S::of(w * (p - y))
                        }));
                    }
                    like(*logits, d)
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * gd[0].f64() / av.len().max(1) as f64;
                self.acc_with(grads, *a, || like(*a, av.iter().zip(bv).map(|(x, y)| S::of(c * (x.f64() - y.f64()))).collect()));
                self.acc_with(grads, *b, || like(*b, av.iter().zip(bv).map(|(x, y)| S::of(c * (y.f64() - x.f64()))).collect()));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, out, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.acc(grads, v, gi);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        pad_l: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (b, cin, l) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let (cout, k) = (tw.dim(0), tw.dim(2));
        let lout = g.dim(2);
        let (xv, wv, gd) = (tx.data(), tw.data(), g.data());
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut dx = if need_x { vec![S::zero(); xv.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![S::zero(); wv.len()] } else { Vec::new() };
        for bi in 0..b {
            for co in 0..cout {
                let grow = &gd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                for ci in 0..cin {
                    let xoff = (bi * cin + ci) * l;
                    for kk in 0..k {
                        let widx = (co * cin + ci) * k + kk;
                        let off = (kk * dilation) as isize - pad_l as isize;
                        let (t0, t1) = valid_range(off, stride, l, lout);
                        if t0 >= t1 {
                            continue;
                        }
                        if stride == 1 {
                            let s0 = xoff + (t0 as isize + off) as usize;
                            let gs = &grow[t0..t1];
                            if need_w {
                                dw[widx] += dot(gs, &xv[s0..s0 + gs.len()]);
                            }
                            if need_x {
                                let wval = wv[widx];
                                for (d, &gv) in dx[s0..s0 + gs.len()].iter_mut().zip(gs) {
                                    *d += wval * gv;
                                }
                            }
                        } else {
                            let wval = wv[widx];
                            let mut acc = S::zero();
                            for t in t0..t1 {
                                let si = xoff + (t as isize * stride as isize + off) as usize;
                                acc += grow[t] * xv[si];
                                if need_x {
                                    dx[si] += wval * grow[t];
                                }
                            }
                            if need_w {
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.acc(grads, x, Tensor::new(tx.shape(), dx).expect("shape"));
        }
        if need_w {
            self.acc(grads, w, Tensor::new(tw.shape(), dw).expect("shape"));
        }
    }
}

/// Output positions `t` in `[t0, t1)` whose source index `t*stride + off`
/// lies inside `[0, l)`.
fn valid_range(off: isize, stride: usize, l: usize, lout: usize) -> (usize, usize) {
    let s = stride as isize;
    let t0 = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let t1 = if (l as isize) <= off { 0 } else { ((l as isize - off) + s - 1) / s };
    let t0 = (t0 as usize).min(lout);
    let t1 = (t1 as usize).min(lout);
    (t0, t1.max(t0))
}

/// Eight interleaved partial sums so the loop vectorizes.
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [S::zero(); 8];
    let split = n - n % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for i in 0..8 {
            lanes[i] += ca[i] * cb[i];
        }
    }
    let mut acc = S::zero();
    for (&x, &y) in a[split..].iter().zip(&b[split..]) {
        acc += x * y;
    }
    for l in lanes {
        acc += l;
    }
    acc
}

pub(crate) fn softmax_row<S: Real>(row: &mut [S]) {
    let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        let e = (v.f64() - m).exp();
        z += e;
        *v = S::of(e);
    }
    for v in row.iter_mut() {
        *v = S::of(v.f64() / z);
    }
}

fn permute_tensor<S: Real>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let shape = t.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let d = t.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(d[src]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("shape")
}
