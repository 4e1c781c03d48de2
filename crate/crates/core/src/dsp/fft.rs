//! Discrete Fourier transform: iterative radix-2 for power-of-two lengths,
//! Bluestein's chirp-z reduction to radix-2 for everything else.

use num_complex::Complex64;
use std::f64::consts::PI;

fn bit_reverse_permute(buf: &mut [Complex64]) {
    let n = buf.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
}

/// In-place radix-2 transform. `sign` is -1 for forward, +1 for inverse
/// (unscaled).
fn radix2(buf: &mut [Complex64], sign: f64) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    bit_reverse_permute(buf);
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half).map(|k| Complex64::from_polar(1.0, ang * k as f64)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn bluestein(input: &[Complex64], sign: f64) -> Vec<Complex64> {
    let n = input.len();
    let m = (2 * n - 1).next_power_of_two();
    // Reduce k^2 modulo 2n before scaling to keep the chirp phase exact.
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            Complex64::from_polar(1.0, sign * PI * k2 / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = input[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, -1.0);
    radix2(&mut b, -1.0);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, 1.0);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| a[k] * scale * chirp[k]).collect()
}

fn transform(input: &[Complex64], sign: f64) -> Vec<Complex64> {
    match input.len() {
        0 => Vec::new(),
        1 => input.to_vec(),
        n if n.is_power_of_two() => {
            let mut buf = input.to_vec();
            radix2(&mut buf, sign);
            buf
        }
        _ => bluestein(input, sign),
    }
}

/// Forward DFT of a complex series, `X_k = Σ x_n e^{-2πikn/N}`.
pub fn dft_complex(x: &[Complex64]) -> Vec<Complex64> {
    transform(x, -1.0)
}

/// Forward DFT of a real series.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&c, -1.0)
}

/// Inverse DFT including the `1/N` factor.
pub fn idft(spectrum: &[Complex64]) -> Vec<Complex64> {
    let n = spectrum.len().max(1) as f64;
    transform(spectrum, 1.0).into_iter().map(|v| v / n).collect()
}

/// Inverse DFT of a spectrum known to belong to a real series.
pub fn idft_real(spectrum: &[Complex64]) -> Vec<f64> {
    idft(spectrum).into_iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// O(N²) reference summation.
    fn naive(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (k * t % n) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn impulse_is_flat() {
        for c in dft(&[1.0, 0.0, 0.0, 0.0]) {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_goes_to_dc() {
        for n in [1usize, 5, 8, 12] {
            let x = vec![2.5; n];
            let s = dft(&x);
            assert!((s[0].re - 2.5 * n as f64).abs() < 1e-12);
            for c in &s[1..] {
                assert!(c.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_summation() {
        let mut r = rng::stream(11);
        for n in 1..=16 {
            let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let fast = dft(&x);
            for (a, b) in fast.iter().zip(naive(&x)) {
                assert!((a - b).norm() < 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn bluestein_handles_large_odd_lengths() {
        let mut r = rng::stream(2);
        let x: Vec<f64> = (0..1000).map(|_| r.random_range(-1.0..1.0)).collect();
        let back = idft_real(&dft(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn round_trip_and_parseval(x in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let s = dft(&x);
            let back = idft_real(&s);
            let scale = x.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-9 * scale);
            }
            let time: f64 = x.iter().map(|v| v * v).sum();
            let freq: f64 = s.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
            prop_assert!((time - freq).abs() <= 1e-9 * time.max(1.0));
        }

        #[test]
        fn linearity(
            x in proptest::collection::vec(-5.0f64..5.0, 12),
            y in proptest::collection::vec(-5.0f64..5.0, 12),
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let lhs = dft(&combo);
            let (sx, sy) = (dft(&x), dft(&y));
            for k in 0..12 {
                prop_assert!((lhs[k] - (sx[k] * a + sy[k] * b)).norm() < 1e-9);
            }
        }
    }
}
