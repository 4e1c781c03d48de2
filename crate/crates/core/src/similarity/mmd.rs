use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Biased (V-statistic) estimate of MMD².
    pub value: f64,
    pub bandwidth: f64,
    pub n: usize,
    pub m: usize,
    /// All pooled points coincide; the median heuristic has no scale.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Order-independent sum: sorting first makes the result a function of the
/// multiset of terms, which keeps `mmd(X, Y) == mmd(Y, X)` bit-exact.
fn canonical_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Median of the non-zero pairwise distances over `x ∪ y`; `None` when every
/// pair coincides.
pub fn median_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Option<f64> {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let v = sq_dist(pooled[i], pooled[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Some(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Biased MMD² with kernel `exp(-‖a-b‖² / (2σ²))` between two point sets.
pub fn mmd_rbf_vectors(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Option<f64>) -> Result<MmdResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("MMD needs two non-empty samples".into()));
    }
    let dim = x[0].len();
    if let Some(bad) = x.iter().chain(y).find(|v| v.len() != dim) {
        return Err(Error::shape("mmd vector", [dim], [bad.len()]));
    }
    let (n, m) = (x.len(), y.len());
    let sigma = match bandwidth {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::InvalidArgument(format!("bandwidth {s} must be positive"))),
        None => match median_distance(x, y) {
            Some(s) => s,
            None => {
                return Ok(MmdResult {
                    value: 0.0,
                    bandwidth: 0.0,
                    n,
                    m,
                    degenerate: true,
                })
            }
        },
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut terms = Vec::with_capacity(s.len() * s.len());
        for a in s {
            for b in s {
                terms.push(k(a, b));
            }
        }
        canonical_sum(terms) / (s.len() * s.len()) as f64
    };
    let mut cross = Vec::with_capacity(n * m);
    for a in x {
        for b in y {
            cross.push(k(a, b));
        }
    }
    let kxx = within(x);
    let kyy = within(y);
    let kxy = canonical_sum(cross) / (n * m) as f64;
    let value = (kxx + kyy - 2.0 * kxy).max(0.0);
    Ok(MmdResult {
        value,
        bandwidth: sigma,
        n,
        m,
        degenerate: false,
    })
}

pub fn flatten(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let len = ds.records().first().map_or(0, |r| r.signal.as_slice().len());
    ds.records()
        .iter()
        .map(|r| {
            let v = r.signal.as_slice();
            if v.len() != len {
                return Err(Error::shape("flattened record", [len], [v.len()]));
            }
            Ok(v.to_vec())
        })
        .collect()
}

/// MMD² between two datasets of flattened records.
pub fn mmd_rbf(x: &Dataset, y: &Dataset, bandwidth: Option<f64>) -> Result<MmdResult> {
    mmd_rbf_vectors(&flatten(x)?, &flatten(y)?, bandwidth)
}
