use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Forward-process variances `β_1..β_T` and their cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Evenly spaced betas from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..steps).map(|i| start + (end - start) * i as f64 / (steps - 1) as f64).collect(),
        };
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε` for a given noise draw. `t = 0` returns `x0`.
pub fn forward_diffuse_with_noise(x0: &[f64], t: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    if t != 0 {
        schedule.check_step(t)?;
    }
    if eps.len() != x0.len() {
        return Err(Error::shape("forward_diffuse noise", [x0.len()], [eps.len()]));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Closed-form draw from `q(x_t | x_0)` with standard normal noise seeded by
/// `noise_seed`.
pub fn forward_diffuse(x0: &[f64], t: usize, schedule: &NoiseSchedule, noise_seed: u64) -> Result<Vec<f64>> {
    let eps = rng::normals(&mut rng::stream(noise_seed), x0.len());
    forward_diffuse_with_noise(x0, t, schedule, &eps)
}
