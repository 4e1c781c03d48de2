use crate::error::{Error, Result};

/// `K` code vectors of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Vec<f64>,
    pub size: usize,
    pub dim: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(vectors: Vec<f64>, size: usize, dim: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!("codebook needs at least 2 codes, got {size}")));
        }
        if vectors.len() != size * dim {
            return Err(Error::shape("codebook", [size, dim], [vectors.len()]));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite codebook entry".into()));
        }
        Ok(Self { vectors, size, dim })
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the closest code; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size {
            let d = sq_dist(z, self.code(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Replaces each `dim`-sized row of `z` by its nearest code. Returns the
    /// quantized rows and their indices.
    pub fn quantize(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        if z.len() % self.dim != 0 {
            return Err(Error::shape("quantize", [self.dim], [z.len() % self.dim]));
        }
        let mut zq = Vec::with_capacity(z.len());
        let mut idx = Vec::with_capacity(z.len() / self.dim);
        for row in z.chunks(self.dim) {
            let k = self.nearest(row);
            zq.extend_from_slice(self.code(k));
            idx.push(k);
        }
        Ok((zq, idx))
    }

    /// Rows of the codes named by `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            if t >= self.size {
                return Err(Error::Index {
                    index: t,
                    bound: self.size,
                });
            }
            out.extend_from_slice(self.code(t));
        }
        Ok(out)
    }
}

/// Exponential-moving-average codebook statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub cluster_size: Vec<f64>,
    pub embed_sum: Vec<f64>,
    pub decay: f64,
    pub usage: Vec<u64>,
}

impl EmaState {
    pub fn new(book: &Codebook, decay: f64) -> Self {
        Self {
            cluster_size: vec![1.0; book.size],
            embed_sum: book.vectors.clone(),
            decay,
            usage: vec![0; book.size],
        }
    }

    /// Moves each code toward the mean of the rows assigned to it, with
    /// Laplace smoothing of the counts so unused codes stay finite.
    pub fn update(&mut self, book: &mut Codebook, z: &[f64], idx: &[usize]) {
        let (k, d) = (book.size, book.dim);
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (row, &c) in z.chunks(d).zip(idx) {
            counts[c] += 1.0;
            self.usage[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        let g = self.decay;
        for c in 0..k {
            self.cluster_size[c] = g * self.cluster_size[c] + (1.0 - g) * counts[c];
        }
        for (e, s) in self.embed_sum.iter_mut().zip(&sums) {
            *e = g * *e + (1.0 - g) * s;
        }
        let n: f64 = self.cluster_size.iter().sum();
        let eps = 1e-5;
        for c in 0..k {
            let smoothed = (self.cluster_size[c] + eps) / (n + k as f64 * eps) * n;
            for j in 0..d {
                book.vectors[c * d + j] = self.embed_sum[c * d + j] / smoothed;
            }
        }
    }

    pub fn used_codes(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }
}
