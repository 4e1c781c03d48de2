//! Interface shared by the generative models, plus per-lead normalization
//! and conversion of sampled signals into labeled datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Dataset, EcgRecord, RhythmClass, Signal, Source};
use crate::rng;

/// A trained class-conditional generator of fixed-shape signals in mV.
pub trait Generator: Send + Sync {
    /// Short identifier used in record ids, reports and manifests.
    fn name(&self) -> &str;
    fn leads(&self) -> usize;
    fn length(&self) -> usize;
    fn sample(&self, label: RhythmClass, n: usize, seed: u64) -> Result<Vec<Signal>>;
    fn to_bytes(&self) -> Vec<u8>;
}

/// Per-lead z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(leads: usize) -> Self {
        Self {
            mean: vec![0.0; leads],
            std: vec![1.0; leads],
        }
    }

    /// Statistics pooled over every record and sample of each lead. Flat
    /// leads get unit scale.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let leads = ds.leads().ok_or_else(|| Error::InvalidArgument("cannot normalize an empty dataset".into()))?;
        let mut sum = vec![0.0; leads];
        let mut sq = vec![0.0; leads];
        let mut count = 0usize;
        for r in ds.records() {
            for (l, row) in r.signal.rows().enumerate() {
                sum[l] += row.iter().sum::<f64>();
                sq[l] += row.iter().map(|v| v * v).sum::<f64>();
            }
            count += r.samples();
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn leads(&self) -> usize {
        self.mean.len()
    }

    /// Lead-major normalized copy of `sig`.
    pub fn normalize(&self, sig: &Signal) -> Result<Vec<f64>> {
        if sig.leads() != self.leads() {
            return Err(Error::shape("normalize", [self.leads()], [sig.leads()]));
        }
        let mut out = Vec::with_capacity(sig.as_slice().len());
        for (l, row) in sig.rows().enumerate() {
            out.extend(row.iter().map(|v| (v - self.mean[l]) / self.std[l]));
        }
        Ok(out)
    }

    pub fn denormalize(&self, data: &[f64], samples: usize) -> Result<Signal> {
        let leads = self.leads();
        if data.len() != leads * samples {
            return Err(Error::shape("denormalize", [leads * samples], [data.len()]));
        }
        let out = data
            .chunks(samples.max(1))
            .enumerate()
            .flat_map(|(l, row)| row.iter().map(move |v| v * self.std[l] + self.mean[l]))
            .collect();
        Signal::new(leads, samples, out)
    }
}

/// Per-class counts of `ds`, the default synthetic sample budget.
pub fn class_budget(ds: &Dataset) -> BTreeMap<RhythmClass, usize> {
    ds.class_counts().clone()
}

/// Samples `counts[c]` signals of each class and wraps them as synthetic
/// records with ids `{name}-{CLASS}-{i}`.
pub fn sample_dataset(gen: &dyn Generator, counts: &BTreeMap<RhythmClass, usize>, fs: f64, seed: u64) -> Result<Dataset> {
    let mut records = Vec::new();
    for (&class, &n) in counts {
        let signals = gen.sample(class, n, rng::mix(seed, class.id() as u64))?;
        for (i, signal) in signals.into_iter().enumerate() {
            let id = format!("{}-{}-{i:05}", gen.name(), class.code());
            records.push(EcgRecord::new(signal, fs, class, id, Source::Synthetic)?);
        }
    }
    Dataset::new(records)
}

/// Records of `ds` as lead-major normalized rows with their class ids.
pub(crate) fn normalized_rows(ds: &Dataset, norm: &Normalizer) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut rows = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for r in ds.records() {
        rows.push(norm.normalize(&r.signal)?);
        labels.push(r.label.id());
    }
    Ok((rows, labels))
}

/// Common preconditions for generator training: non-empty, one length.
pub(crate) fn training_shape(ds: &Dataset) -> Result<(usize, usize)> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let length = ds
        .uniform_length()
        .ok_or_else(|| Error::InvalidArgument("generator training needs records of one length".into()))?;
    Ok((ds.leads().unwrap_or(0), length))
}
