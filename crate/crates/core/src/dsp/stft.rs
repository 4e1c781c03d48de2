//! Hann-windowed short-time Fourier transform with centered frames and a
//! window-sum-normalized overlap-add inverse.

use std::f64::consts::PI;

use super::fft::dft;
use crate::error::{Error, Result};

pub const DEFAULT_N_FFT: usize = 16;
pub const DEFAULT_HOP: usize = 8;

/// One-sided spectrogram stored bin-major: `re[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub n_fft: usize,
    pub hop: usize,
    pub frames: usize,
}

impl Spectrogram {
    pub fn zeros(n_fft: usize, hop: usize, frames: usize) -> Self {
        let len = (n_fft / 2 + 1) * frames;
        Self {
            re: vec![0.0; len],
            im: vec![0.0; len],
            n_fft,
            hop,
            frames,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn at(&self, bin: usize, frame: usize) -> (f64, f64) {
        let i = bin * self.frames + frame;
        (self.re[i], self.im[i])
    }

    pub fn add(&self, other: &Spectrogram) -> Spectrogram {
        let mut out = self.clone();
        out.re.iter_mut().zip(&other.re).for_each(|(a, b)| *a += b);
        out.im.iter_mut().zip(&other.im).for_each(|(a, b)| *a += b);
        out
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn check_params(n_fft: usize, hop: usize) -> Result<()> {
    if !n_fft.is_power_of_two() || n_fft < 2 {
        return Err(Error::InvalidArgument(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop > n_fft {
        return Err(Error::Hop { hop, n_fft });
    }
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be positive".into()));
    }
    Ok(())
}

/// Number of frames `stft` produces for a series of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// Frames are centered: the series is zero-padded by `n_fft/2` on both sides.
pub fn stft(x: &[f64], n_fft: usize, hop: usize) -> Result<Spectrogram> {
    check_params(n_fft, hop)?;
    let pad = n_fft / 2;
    let window = hann(n_fft);
    let frames = frame_count(x.len(), hop);
    let bins = n_fft / 2 + 1;
    let mut out = Spectrogram::zeros(n_fft, hop, frames);
    let mut buf = vec![0.0; n_fft];
    for f in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            let pos = (f * hop + i) as isize - pad as isize;
            *b = if pos >= 0 && (pos as usize) < x.len() {
                x[pos as usize] * window[i]
            } else {
                0.0
            };
        }
        let spec = dft(&buf);
        for k in 0..bins {
            out.re[k * frames + f] = spec[k].re;
            out.im[k * frames + f] = spec[k].im;
        }
    }
    Ok(out)
}

/// Precomputed overlap-add synthesis for a fixed geometry. Linear in the
/// spectrogram; [`IstftPlan::adjoint`] is its exact transpose.
#[derive(Debug, Clone)]
pub struct IstftPlan {
    pub n_fft: usize,
    pub hop: usize,
    pub frames: usize,
    pub out_len: usize,
    window: Vec<f64>,
    inv_norm: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl IstftPlan {
    pub fn new(n_fft: usize, hop: usize, frames: usize, out_len: usize) -> Result<Self> {
        check_params(n_fft, hop)?;
        let pad = n_fft / 2;
        let window = hann(n_fft);
        let total = (frames - 1) * hop + n_fft;
        let mut wsum = vec![0.0; total];
        for f in 0..frames {
            for i in 0..n_fft {
                wsum[f * hop + i] += window[i] * window[i];
            }
        }
        if out_len + pad > total {
            return Err(Error::InvalidArgument(format!(
                "{frames} frames cover at most {} samples, requested {out_len}",
                total - pad
            )));
        }
        let inv_norm = (0..out_len)
            .map(|n| {
                let w = wsum[n + pad];
                if w > 1e-10 {
                    1.0 / w
                } else {
                    0.0
                }
            })
            .collect();
        let bins = n_fft / 2 + 1;
        let mut cos = vec![0.0; bins * n_fft];
        let mut sin = vec![0.0; bins * n_fft];
        for k in 0..bins {
            for t in 0..n_fft {
                let ang = 2.0 * PI * ((k * t) % n_fft) as f64 / n_fft as f64;
                cos[k * n_fft + t] = ang.cos();
                sin[k * n_fft + t] = ang.sin();
            }
        }
        Ok(Self {
            n_fft,
            hop,
            frames,
            out_len,
            window,
            inv_norm,
            cos,
            sin,
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn bin_weight(&self, k: usize) -> f64 {
        let c = if k == 0 || 2 * k == self.n_fft { 1.0 } else { 2.0 };
        c / self.n_fft as f64
    }

    /// Real inverse DFT of one frame, given as bin-indexed accessors.
    fn frame_time(&self, re: impl Fn(usize) -> f64, im: impl Fn(usize) -> f64, out: &mut [f64]) {
        let n = self.n_fft;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.bins() {
            let w = self.bin_weight(k);
            let (r, i) = (re(k) * w, if k == 0 || 2 * k == n { 0.0 } else { im(k) * w });
            let (c, s) = (&self.cos[k * n..(k + 1) * n], &self.sin[k * n..(k + 1) * n]);
            for t in 0..n {
                out[t] += r * c[t] - i * s[t];
            }
        }
    }

    /// Synthesizes a series from bin-major `re`/`im` arrays (`bins × frames`).
    pub fn synthesize(&self, re: &[f64], im: &[f64]) -> Vec<f64> {
        let (frames, pad) = (self.frames, self.n_fft / 2);
        let mut y = vec![0.0; self.out_len];
        let mut buf = vec![0.0; self.n_fft];
        for f in 0..frames {
            self.frame_time(|k| re[k * frames + f], |k| im[k * frames + f], &mut buf);
            for t in 0..self.n_fft {
                let pos = (f * self.hop + t) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < self.out_len {
                    y[pos as usize] += self.window[t] * buf[t];
                }
            }
        }
        y.iter_mut().zip(&self.inv_norm).for_each(|(v, s)| *v *= s);
        y
    }

    /// Transpose of [`IstftPlan::synthesize`]: maps a gradient on the output
    /// series to gradients on `re` and `im`.
    pub fn adjoint(&self, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (frames, pad, n) = (self.frames, self.n_fft / 2, self.n_fft);
        let bins = self.bins();
        let mut g_re = vec![0.0; bins * frames];
        let mut g_im = vec![0.0; bins * frames];
        let mut seg = vec![0.0; n];
        for f in 0..frames {
            for (t, s) in seg.iter_mut().enumerate() {
                let pos = (f * self.hop + t) as isize - pad as isize;
                *s = if pos >= 0 && (pos as usize) < self.out_len {
                    grad[pos as usize] * self.inv_norm[pos as usize] * self.window[t]
                } else {
                    0.0
                };
            }
            for k in 0..bins {
                let w = self.bin_weight(k);
                let (c, s) = (&self.cos[k * n..(k + 1) * n], &self.sin[k * n..(k + 1) * n]);
                let dc: f64 = seg.iter().zip(c).map(|(a, b)| a * b).sum();
                g_re[k * frames + f] = w * dc;
                if k != 0 && 2 * k != n {
                    let ds: f64 = seg.iter().zip(s).map(|(a, b)| a * b).sum();
                    g_im[k * frames + f] = -w * ds;
                }
            }
        }
        (g_re, g_im)
    }
}

pub fn istft(s: &Spectrogram, hop: usize, out_len: usize) -> Result<Vec<f64>> {
    let plan = IstftPlan::new(s.n_fft, hop, s.frames, out_len)?;
    Ok(plan.synthesize(&s.re, &s.im))
}

/// Splits at `cutoff_bin`: the low part keeps bins below the cutoff, the
/// high part keeps the rest. The two always sum back to `s` exactly.
pub fn split_lf_hf(s: &Spectrogram, cutoff_bin: usize) -> Result<(Spectrogram, Spectrogram)> {
    if cutoff_bin == 0 || cutoff_bin >= s.bins() {
        return Err(Error::InvalidArgument(format!(
            "cutoff bin must lie in 1..{}, got {cutoff_bin}",
            s.bins()
        )));
    }
    let split = cutoff_bin * s.frames;
    let mut lf = s.clone();
    let mut hf = s.clone();
    lf.re[split..].iter_mut().for_each(|v| *v = 0.0);
    lf.im[split..].iter_mut().for_each(|v| *v = 0.0);
    hf.re[..split].iter_mut().for_each(|v| *v = 0.0);
    hf.im[..split].iter_mut().for_each(|v| *v = 0.0);
    Ok((lf, hf))
}

pub fn default_cutoff(n_fft: usize) -> usize {
    ((n_fft / 2 + 1) / 4).max(1)
}
