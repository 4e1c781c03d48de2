//! Zero-pad / DFT / crop spectral representation of a real series.

use num_complex::Complex64;

use super::fft::{dft, idft_real};
use crate::error::{Error, Result};

/// Cropped spectrum of a zero-padded real series of padded length `n`.
///
/// `re[k]` and `im[k]` hold bins `0..n/2`. The imaginary part of the DC bin
/// is always zero for real input, so `im[0]` carries the real Nyquist
/// coefficient instead; this keeps exactly `n` real numbers and makes the
/// transform a bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub n: usize,
    pub len: usize,
}

impl SpectralVector {
    /// `[re..., im...]`, length `n`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.re.clone();
        v.extend_from_slice(&self.im);
        v
    }

    pub fn from_flat(flat: &[f64], len: usize) -> Result<Self> {
        let n = flat.len();
        if n % 2 != 0 || n < len {
            return Err(Error::Pad { pad: n, len });
        }
        Ok(Self {
            re: flat[..n / 2].to_vec(),
            im: flat[n / 2..].to_vec(),
            n,
            len,
        })
    }
}

pub fn frequency_transform(x: &[f64], n: usize) -> Result<SpectralVector> {
    if n < x.len() || n % 2 != 0 || n == 0 {
        return Err(Error::Pad { pad: n, len: x.len() });
    }
    let mut padded = x.to_vec();
    padded.resize(n, 0.0);
    let spec = dft(&padded);
    let half = n / 2;
    let re: Vec<f64> = spec[..half].iter().map(|c| c.re).collect();
    let mut im: Vec<f64> = spec[..half].iter().map(|c| c.im).collect();
    im[0] = spec[half].re;
    Ok(SpectralVector {
        re,
        im,
        n,
        len: x.len(),
    })
}

pub fn inverse_frequency_transform(v: &SpectralVector) -> Vec<f64> {
    let (n, half) = (v.n, v.n / 2);
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[0] = Complex64::new(v.re[0], 0.0);
    full[half] = Complex64::new(v.im[0], 0.0);
    for k in 1..half {
        full[k] = Complex64::new(v.re[k], v.im[k]);
        full[n - k] = full[k].conj();
    }
    let mut x = idft_real(&full);
    x.truncate(v.len);
    x
}

/// `log |det J|` of the map from a length-`n` real series to its flat
/// spectral vector (only meaningful when no padding is applied).
pub fn frequency_transform_log_det(n: usize) -> f64 {
    let half = n as f64 / 2.0;
    (n as f64).ln() + (half - 1.0) * half.ln()
}
