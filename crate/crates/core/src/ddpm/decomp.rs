use nalgebra::DMatrix;

use crate::dsp::{dft, idft_real, Complex64};
use crate::error::{Error, Result};
use crate::nn::{CustomOp, Real, Tensor};

/// Orthonormal basis of polynomials of degree ≤ p on `c = [0, …, τ−1]/τ`.
#[derive(Debug, Clone)]
pub struct PolyProjector {
    /// [τ, p+1], column-orthonormal.
    q: DMatrix<f64>,
}

impl PolyProjector {
    pub fn new(len: usize, degree: usize) -> Result<Self> {
        if len <= degree {
            return Err(Error::InvalidArgument(format!("degree {degree} needs more than {len} samples")));
        }
        let basis = DMatrix::from_fn(len, degree + 1, |i, j| (i as f64 / len as f64).powi(j as i32));
        let q = basis.qr().q();
        Ok(Self { q })
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    /// Least-squares polynomial fit of `x` evaluated on the window.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(x);
        let coef = self.q.transpose() * v;
        (&self.q * coef).iter().copied().collect()
    }

    /// The basis as [τ, p+1] and its transpose, in storage precision.
    pub fn tensors<S: Real>(&self) -> (Tensor<S>, Tensor<S>) {
        let (n, k) = self.q.shape();
        let q = Tensor::new(&[n, k], (0..n * k).map(|i| S::of(self.q[(i / k, i % k)])).collect()).expect("shape");
        let qt = Tensor::new(&[k, n], (0..n * k).map(|i| S::of(self.q[(i % n, i / n)])).collect()).expect("shape");
        (q, qt)
    }
}

/// Real-DFT bins `0..=τ/2` of the `a` largest amplitudes, ties to the lower
/// bin, in ascending order.
pub fn top_amplitude_bins(spectrum: &[Complex64], a: usize) -> Vec<usize> {
    let half = spectrum.len() / 2;
    let mut bins: Vec<usize> = (0..=half.min(spectrum.len().saturating_sub(1))).collect();
    bins.sort_by(|&i, &j| spectrum[j].norm().total_cmp(&spectrum[i].norm()).then(i.cmp(&j)));
    bins.truncate(a);
    bins.sort_unstable();
    bins
}

/// Projects `x` onto the Fourier components of its `a` strongest bins.
/// Returns the filtered series and the bins kept.
pub fn top_harmonics(x: &[f64], a: usize) -> (Vec<f64>, Vec<usize>) {
    let n = x.len();
    if a == 0 || n == 0 {
        return (vec![0.0; n], Vec::new());
    }
    let spec = dft(x);
    let bins = top_amplitude_bins(&spec, a);
    (mask_bins(&spec, &bins), bins)
}

fn mask_bins(spec: &[Complex64], bins: &[usize]) -> Vec<f64> {
    let n = spec.len();
    let mut kept = vec![Complex64::new(0.0, 0.0); n];
    for &k in bins {
        kept[k] = spec[k];
        kept[(n - k) % n] = spec[(n - k) % n];
    }
    idft_real(&kept)
}

/// Row-wise top-harmonic projection over the last axis. The bin choice is
/// piecewise constant in the input, and for a fixed choice the map is an
/// orthogonal projection, so the backward pass projects the gradient with
/// the same bins.
pub(crate) struct SeasonalOp {
    pub harmonics: usize,
}

impl SeasonalOp {
    fn apply<S: Real>(&self, x: &Tensor<S>, bins_from: &Tensor<S>) -> Tensor<S> {
        let n = *x.shape().last().expect("rank >= 1");
        let mut out = Vec::with_capacity(x.numel());
        for (row, src) in x.data().chunks(n).zip(bins_from.data().chunks(n)) {
            let src: Vec<f64> = src.iter().map(|v| v.f64()).collect();
            let bins = top_amplitude_bins(&dft(&src), self.harmonics);
            let spec = dft(&row.iter().map(|v| v.f64()).collect::<Vec<_>>());
            out.extend(mask_bins(&spec, &bins).into_iter().map(S::of));
        }
        Tensor::new(x.shape(), out).expect("shape")
    }
}

impl<S: Real> CustomOp<S> for SeasonalOp {
    fn name(&self) -> &str {
        "seasonal"
    }

    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if self.harmonics == 0 {
            return Ok(Tensor::zeros(inputs[0].shape()));
        }
        Ok(self.apply(inputs[0], inputs[0]))
    }

    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        if self.harmonics == 0 {
            return vec![Some(Tensor::zeros(grad.shape()))];
        }
        vec![Some(self.apply(grad, inputs[0]))]
    }
}

/// Components of a decomposition estimate for one series.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub trend: Vec<f64>,
    /// One seasonal term per block.
    pub seasonal: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
    pub x0: Vec<f64>,
}

/// Combines per-block outputs into `x̂0 = trend + Σ seasonal + residual`.
/// Each block contributes a trend input (fitted by the degree-`degree`
/// polynomial regressor) and a seasonal input (reduced to its `harmonics`
/// strongest Fourier components).
pub fn decomposition_synthesize(
    trend_inputs: &[Vec<f64>],
    seasonal_inputs: &[Vec<f64>],
    residual: &[f64],
    degree: usize,
    harmonics: usize,
) -> Result<Decomposition> {
    let n = residual.len();
    if let Some(bad) = trend_inputs.iter().chain(seasonal_inputs).find(|v| v.len() != n) {
        return Err(Error::shape("decomposition block", [n], [bad.len()]));
    }
    let poly = PolyProjector::new(n, degree)?;
    let mut trend = vec![0.0; n];
    for t in trend_inputs {
        for (a, b) in trend.iter_mut().zip(poly.project(t)) {
            *a += b;
        }
    }
    let seasonal: Vec<Vec<f64>> = seasonal_inputs.iter().map(|s| top_harmonics(s, harmonics).0).collect();
    let mut x0: Vec<f64> = trend.iter().zip(residual).map(|(a, b)| a + b).collect();
    for s in &seasonal {
        for (a, b) in x0.iter_mut().zip(s) {
            *a += b;
        }
    }
    Ok(Decomposition {
        trend,
        seasonal,
        residual: residual.to_vec(),
        x0,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    #[test]
    fn zero_blocks_leave_residual() {
        let r: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let d = decomposition_synthesize(&vec![vec![0.0; 32]; 2], &vec![vec![0.0; 32]; 2], &r, 3, 4).unwrap();
        assert_eq!(d.x0, r);
        assert!(d.trend.iter().all(|v| v.abs() < 1e-15));
    }

    fn least_squares_line(y: &[f64]) -> Vec<f64> {
        let n = y.len() as f64;
        let xs: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(y).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        xs.iter().map(|x| my + slope * (x - mx)).collect()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn linear_trend_is_recovered() {
        let y: Vec<f64> = (0..100).map(|i| 0.5 - 0.02 * i as f64).collect();
        let d = decomposition_synthesize(&[y.clone()], &[y.clone()], &vec![0.0; 100], 3, 0).unwrap();
        assert!(correlation(&d.trend, &least_squares_line(&y)) > 0.99);
        assert!(d.seasonal[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_tone_selects_its_bin() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * 5.0 * i as f64 / n as f64 + 0.4).cos()).collect();
        let (filtered, bins) = top_harmonics(&x, 1);
        assert_eq!(bins, vec![5]);
        for (a, b) in filtered.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn projector_is_idempotent() {
        let p = PolyProjector::new(50, 3).unwrap();
        let x: Vec<f64> = (0..50).map(|i| ((i * 7919) % 13) as f64).collect();
        let once = p.project(&x);
        let twice = p.project(&once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-10);
        }
        let cubic: Vec<f64> = (0..50).map(|i| (i as f64 / 50.0).powi(3) - 0.2).collect();
        for (a, b) in p.project(&cubic).iter().zip(&cubic) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
