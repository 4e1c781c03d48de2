use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::mmd::flatten;
use crate::error::{Error, IoContext, Result};
use crate::record::Dataset;

/// Principal components of a point cloud.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm component directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    /// Eigen-decomposition of the sample covariance. When there are fewer
    /// points than dimensions the equivalent n×n Gram matrix is decomposed
    /// instead and its eigenvectors mapped back to feature space.
    pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::InvalidArgument("PCA of an empty set".into()));
        }
        let d = data[0].len();
        let mut mean = vec![0.0; d];
        for row in data {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
        let denom = (n.max(2) - 1) as f64;
        let total_variance = x.iter().map(|v| v * v).sum::<f64>() / denom;
        let k = k.min(d).min(n);
        let mut pairs: Vec<(f64, Vec<f64>)> = if n < d {
            let gram = &x * x.transpose() / denom;
            let eig = SymmetricEigen::new(gram);
            let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            // Null-space eigenvectors have no feature-space counterpart.
            (0..n)
                .filter(|&i| eig.eigenvalues[i] > top * 1e-12)
                .map(|i| {
                    let v = x.transpose() * eig.eigenvectors.column(i);
                    let dir = &v / v.norm();
                    (eig.eigenvalues[i], dir.iter().copied().collect())
                })
                .collect()
        } else {
            let cov = x.transpose() * &x / denom;
            let eig = SymmetricEigen::new(cov);
            (0..d)
                .map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).iter().copied().collect()))
                .collect()
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs.truncate(k);
        Ok(Self {
            mean,
            variances: pairs.iter().map(|p| p.0).collect(),
            components: pairs.into_iter().map(|p| p.1).collect(),
            total_variance,
        })
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.variances
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum())
            .collect()
    }

    /// Reconstruction from the first `k` coordinates.
    pub fn reconstruct(&self, coords: &[f64], k: usize) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords).take(k) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }
}

/// Feature representation written by [`export_embeddings`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    Raw,
    Pca(usize),
}

/// Writes one CSV row per record: `origin` (real/synth), `class`, features.
/// Returns the number of data rows.
pub fn export_embeddings(real: &Dataset, synth: &Dataset, mode: EmbeddingMode, out_path: &Path) -> Result<usize> {
    let mut rows = flatten(real)?;
    let synth_rows = flatten(synth)?;
    if let (Some(a), Some(b)) = (rows.first(), synth_rows.first()) {
        if a.len() != b.len() {
            return Err(Error::shape("embedding rows", [a.len()], [b.len()]));
        }
    }
    rows.extend(synth_rows);
    let labels: Vec<(&str, &str)> = real
        .records()
        .iter()
        .map(|r| ("real", r.label.code()))
        .chain(synth.records().iter().map(|r| ("synth", r.label.code())))
        .collect();
    let features: Vec<Vec<f64>> = match mode {
        EmbeddingMode::Raw => rows,
        EmbeddingMode::Pca(k) if !rows.is_empty() => {
            let pca = Pca::fit(&rows, k)?;
            rows.iter().map(|r| pca.transform(r)).collect()
        }
        EmbeddingMode::Pca(_) => rows,
    };
    let width = features.first().map_or(0, Vec::len);
    let mut text = String::from("origin,class");
    for j in 0..width {
        let _ = write!(text, ",f{j}");
    }
    text.push('\n');
    for ((origin, class), f) in labels.iter().zip(&features) {
        text.push_str(origin);
        text.push(',');
        text.push_str(class);
        for v in f {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    std::fs::write(out_path, text).io_context(|| format!("writing {}", out_path.display()))?;
    Ok(features.len())
}
