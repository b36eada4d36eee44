//! DDPM noise schedule and the closed-form forward process.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Constants `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π_{s≤t} α_s` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Config, "schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            bail!(Config, "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}");
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// The canonical 1e-4 → 0.02 ramp with both ends stretched by `1000/steps`,
    /// so shorter chains still end close to pure noise.
    pub fn linear_scaled(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps as f64;
        Self::linear(steps, 1e-4 * scale, (0.02 * scale).min(0.999))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    /// Rebuild from stored betas, e.g. when loading a checkpoint.
    pub fn from_stored_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            bail!(Format, "stored schedule has invalid betas");
        }
        Ok(Self::from_betas(beta))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            bail!(Contract, "step {t} outside 1..={}", self.steps());
        }
        Ok(())
    }

    /// `β_t` for 1-based `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Variance of the reverse-step posterior `q(z_{t-1} | z_t, z_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        let prev = self.alpha_bar(t - 1);
        (1.0 - prev) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1−ᾱ_t)·noise`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        Self::q_sample_with(z0, self.alpha_bar(t), noise)
    }

    /// Forward process at an explicit `ᾱ`, which lets callers probe the
    /// `ᾱ → 1` limit.
    pub fn q_sample_with(z0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor> {
        if z0.shape() != noise.shape() {
            bail!(Dimension, "noise {:?} for latent {:?}", noise.shape(), z0.shape());
        }
        let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        z0.zip_map(noise, |z, n| a * z + b * n)
    }

    /// Batched forward process with one step per sample of `z0[b, ...]`.
    pub fn q_sample_batch(&self, z0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
        if z0.shape() != noise.shape() || z0.shape().first() != Some(&t.len()) {
            bail!(Dimension, "q_sample_batch: {:?}, {:?}, {} steps", z0.shape(), noise.shape(), t.len());
        }
        let inner = z0.numel() / t.len();
        let mut out = Vec::with_capacity(z0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let (a, b) = (self.alpha_bar(ti).sqrt(), (1.0 - self.alpha_bar(ti)).sqrt());
            let zs = &z0.data()[i * inner..(i + 1) * inner];
            let ns = &noise.data()[i * inner..(i + 1) * inner];
            out.extend(zs.iter().zip(ns).map(|(z, n)| a * z + b * n));
        }
        Tensor::new(z0.shape(), out)
    }
}
