//! Spectral transforms shared by the VQ and flow generators.

mod fft;
mod freq;
mod stft;

pub use fft::{dft, dft_complex, idft, idft_real};
pub use freq::{frequency_transform, frequency_transform_log_det, inverse_frequency_transform, SpectralVector};
pub use num_complex::Complex64;
pub use stft::{
    default_cutoff, frame_count, hann, istft, split_lf_hf, stft, IstftPlan, Spectrogram, DEFAULT_HOP, DEFAULT_N_FFT,
};
