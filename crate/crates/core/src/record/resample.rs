use super::{Dataset, EcgRecord, Signal};
use crate::error::{Error, Result};

const TAPS: usize = 63;

/// Hamming-windowed sinc low-pass with unit DC gain; `cutoff` in cycles/sample.
fn lowpass(cutoff: f64) -> Vec<f64> {
    let mid = (TAPS / 2) as f64;
    let mut h: Vec<f64> = (0..TAPS)
        .map(|i| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * x).sin() / (std::f64::consts::PI * x)
            };
            let window = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (TAPS - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Extends `x` by `pad` samples on each side using point reflection about the
/// endpoints, which preserves constants and straight lines.
fn extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let at = |k: usize| x[k.min(n - 1)];
    let mut out = Vec::with_capacity(n + 2 * pad);
    for k in (1..=pad).rev() {
        out.push(2.0 * x[0] - at(k));
    }
    out.extend_from_slice(x);
    for k in 1..=pad {
        out.push(2.0 * x[n - 1] - at((n - 1).saturating_sub(k)));
    }
    out
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let k = r.round();
    (k >= 1.0 && (r - k).abs() < 1e-9).then_some(k as usize)
}

fn resample_row(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let factor = up.max(down);
    let h = lowpass(0.5 / factor as f64);
    let half = TAPS / 2;
    let pad = half / up + 2;
    let ext = extend(x, pad);
    // Zero-stuffed, padded sequence lives implicitly: index j*up holds ext[j].
    let stuffed_len = ext.len() * up;
    let out_len = (x.len() * up).div_ceil(down);
    let offset = pad * up;
    (0..out_len)
        .map(|o| {
            let center = offset + o * down;
            let mut acc = 0.0;
            let mut weight = 0.0;
            for (k, &hk) in h.iter().enumerate() {
                let idx = center + k;
                if idx < half || idx - half >= stuffed_len {
                    continue;
                }
                let pos = idx - half;
                if pos % up == 0 {
                    acc += hk * ext[pos / up];
                    weight += hk;
                }
            }
            // Per-phase normalization keeps constants exact when upsampling.
            acc / weight
        })
        .collect()
}

/// Resamples by an integer up or down factor with a 63-tap anti-alias filter.
pub fn resample(record: &EcgRecord, target_fs: f64) -> Result<EcgRecord> {
    if !(target_fs.is_finite() && target_fs > 0.0) {
        return Err(Error::UnsupportedRatio {
            from: record.fs,
            to: target_fs,
        });
    }
    if target_fs == record.fs {
        return Ok(record.clone());
    }
    let (up, down) = match (integer_ratio(record.fs, target_fs), integer_ratio(target_fs, record.fs)) {
        (Some(m), _) => (1, m),
        (_, Some(l)) => (l, 1),
        _ => {
            return Err(Error::UnsupportedRatio {
                from: record.fs,
                to: target_fs,
            })
        }
    };
    let rows: Vec<Vec<f64>> = record.signal.rows().map(|r| resample_row(r, up, down)).collect();
    let mut out = record.clone();
    out.signal = Signal::from_rows(rows)?;
    out.fs = target_fs;
    Ok(out)
}

pub fn resample_dataset(ds: &Dataset, target_fs: f64) -> Result<Dataset> {
    if ds.fs().is_none_or(|fs| fs == target_fs) {
        return Ok(ds.clone());
    }
    let records = ds
        .records()
        .iter()
        .map(|r| resample(r, target_fs))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}
