//! Differentially private fine-tuning: Poisson sampling, per-sample
//! clipping, Gaussian noise and a plain SGD update.

pub mod lora;

use crate::accountant::PrivacyLedger;
use crate::autodiff::{per_sample_grads, GradMap, Tape};
use crate::diffusion::{ldm_loss, DiffusionModel};
use crate::error::{bail, Result};
use crate::params::ParamStore;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Settings of one DP-SGD run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Expected logical batch size `B`; also the fixed normaliser.
    pub batch_size: usize,
    /// Clipping norm `C`. `f64::INFINITY` disables clipping (only valid
    /// with `sigma = 0`).
    pub clip: f64,
    /// Noise multiplier `σ`.
    pub sigma: f64,
    pub lr: f64,
    /// Total iterations `P`.
    pub steps: u64,
    pub seed: u64,
    /// Samples per physical pass. Has no effect on the result.
    pub microbatch: usize,
    pub delta: f64,
    /// Noise comes from a seeded generator rather than an entropy source.
    pub research_mode: bool,
}

impl DpConfig {
    /// Iterations for `epochs` passes over `n` records: `epochs·⌈n/B⌉`.
    pub fn steps_for_epochs(epochs: u64, n: usize, batch_size: usize) -> u64 {
        epochs * n.div_ceil(batch_size.max(1)) as u64
    }

    /// Sampling rate `q = B/N`.
    pub fn sample_rate(&self, n: usize) -> f64 {
        self.batch_size as f64 / n as f64
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            bail!(Data, "private dataset is empty");
        }
        if self.batch_size == 0 || self.batch_size > n {
            bail!(Config, "expected batch size {} must lie in 1..={n}", self.batch_size);
        }
        if !(self.clip > 0.0) {
            bail!(Config, "clipping norm must be positive, got {}", self.clip);
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            bail!(Config, "noise multiplier must be finite and non-negative, got {}", self.sigma);
        }
        if self.clip.is_infinite() && self.sigma > 0.0 {
            bail!(Config, "unbounded clipping norm needs sigma = 0");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be finite and non-negative");
        }
        if self.microbatch == 0 {
            bail!(Config, "microbatch size must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            bail!(Config, "delta {} outside (0, 1)", self.delta);
        }
        Ok(())
    }

    pub fn ledger(&self, n: usize) -> PrivacyLedger {
        PrivacyLedger::new(self.sample_rate(n), self.sigma, self.delta, self.clip)
    }
}

/// Include each of `0..n` independently with probability `q`.
pub fn poisson_subsample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.gen::<f64>() < q).collect()
}

/// Rescale `g` to norm at most `clip`: `g / max(1, ‖g‖/C)`.
pub fn clip_gradient(mut g: GradMap, clip: f64) -> GradMap {
    let factor = 1.0 / (g.norm() / clip).max(1.0);
    if factor != 1.0 {
        g.scale(factor);
    }
    g
}

/// `(Σ ĝ_i + N(0, σ²C²·I)) / B`. The sum runs over `clipped` in order; the
/// noise is one draw over the parameters of `template` concatenated in
/// key order. With `σ = 0` no noise is drawn.
pub fn noisy_aggregate<R: Rng + ?Sized>(
    clipped: &[GradMap],
    template: &GradMap,
    sigma: f64,
    clip: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<(GradMap, f64)> {
    let mut sum = template.flatten();
    sum.iter_mut().for_each(|v| *v = 0.0);
    for g in clipped {
        accumulate(&mut sum, g)?;
    }
    finish_aggregate(sum, template, sigma, clip, batch_size, rng)
}

fn accumulate(sum: &mut [f64], g: &GradMap) -> Result<()> {
    let flat = g.flatten();
    if flat.len() != sum.len() {
        bail!(Contract, "gradient of {} values for {} parameters", flat.len(), sum.len());
    }
    for (s, v) in sum.iter_mut().zip(&flat) {
        *s += v;
    }
    Ok(())
}

fn finish_aggregate<R: Rng + ?Sized>(
    mut sum: Vec<f64>,
    template: &GradMap,
    sigma: f64,
    clip: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<(GradMap, f64)> {
    let mut noise_sq = 0.0;
    if sigma > 0.0 {
        let sd = sigma * clip;
        for s in sum.iter_mut() {
            let z = sd * rng.sample::<f64, _>(StandardNormal);
            noise_sq += z * z;
            *s += z;
        }
    }
    let b = batch_size as f64;
    sum.iter_mut().for_each(|v| *v /= b);
    let mut out = template.clone();
    out.assign_flat(&sum)?;
    Ok((out, noise_sq.sqrt()))
}

/// Per-step record streamed to the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub batch: usize,
    pub microbatches: usize,
    pub norm_min: f64,
    pub norm_median: f64,
    pub norm_max: f64,
    pub clipped_fraction: f64,
    /// Largest post-clip norm seen in the step.
    pub max_clipped_norm: f64,
    /// Post-clip norms above `C`; always zero unless something is broken.
    pub violations: usize,
    pub noise_norm: f64,
    pub trainable: usize,
    pub loss: f64,
}

/// Step-by-step executor. All randomness of step `k` is derived from
/// `(seed, k)`, so a run can be resumed from the ledger's step count.
pub struct DpTrainer<'a> {
    pub cfg: DpConfig,
    latents: &'a Tensor,
    labels: Option<&'a [usize]>,
    pub ledger: PrivacyLedger,
}

impl<'a> DpTrainer<'a> {
    pub fn new(cfg: DpConfig, latents: &'a Tensor, labels: Option<&'a [usize]>) -> Result<Self> {
        let n = latents.shape().first().copied().unwrap_or(0);
        cfg.validate(n)?;
        if let Some(l) = labels {
            if l.len() != n {
                bail!(Data, "{} labels for {n} private latents", l.len());
            }
        }
        let ledger = cfg.ledger(n);
        Ok(Self { cfg, latents, labels, ledger })
    }

    /// Continue a run whose ledger was saved after `ledger.steps` steps.
    pub fn resume(cfg: DpConfig, latents: &'a Tensor, labels: Option<&'a [usize]>, ledger: PrivacyLedger) -> Result<Self> {
        let mut t = Self::new(cfg, latents, labels)?;
        let fresh = &t.ledger;
        if fresh.q != ledger.q || fresh.sigma != ledger.sigma || fresh.clip != ledger.clip || fresh.delta != ledger.delta {
            bail!(State, "saved ledger does not match the run configuration");
        }
        if ledger.steps > t.cfg.steps {
            bail!(State, "saved ledger has {} steps, run is configured for {}", ledger.steps, t.cfg.steps);
        }
        t.ledger = ledger;
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn done(&self) -> bool {
        self.ledger.steps >= self.cfg.steps
    }

    /// Execute the next step of the run.
    pub fn step(&mut self, model: &mut DiffusionModel) -> Result<StepReport> {
        let k = self.ledger.steps;
        let cfg = &self.cfg;
        let q = self.ledger.q;
        let batch = poisson_subsample(self.n(), q, &mut stream(cfg.seed, Purpose::Poisson, &[k]));
        let template = model.store.zero_grads();
        let trainable = template.numel();

        let mut sum = vec![0.0; trainable];
        let mut norms = Vec::with_capacity(batch.len());
        let (mut clipped_count, mut violations, mut max_clipped, mut loss_sum) = (0, 0, 0.0f64, 0.0);
        let mut microbatches = 0;
        if trainable > 0 {
            for chunk in batch.chunks(cfg.microbatch) {
                microbatches += 1;
                let losses = std::sync::Mutex::new(vec![0.0; chunk.len()]);
                let items: Vec<(usize, usize)> = chunk.iter().copied().enumerate().collect();
                let model_ref: &DiffusionModel = model;
                let grads = per_sample_grads(&items, &model_ref.store, |tape: &mut Tape, &(slot, i): &(usize, usize)| {
                    let z0 = self.latents.select_rows(&[i]);
                    let y = self.labels.map(|l| [l[i]]);
                    let mut rng = stream(cfg.seed, Purpose::SampleLoss, &[k, i as u64]);
                    let loss = ldm_loss(tape, model_ref, &model_ref.schedule, &z0, y.as_ref().map(|y| &y[..]), &mut rng)?;
                    losses.lock().expect("loss slots")[slot] = tape.value(loss).item();
                    Ok(loss)
                })?;
                loss_sum += losses.into_inner().expect("loss slots").iter().sum::<f64>();
                for g in grads {
                    let norm = g.norm();
                    norms.push(norm);
                    if norm > cfg.clip {
                        clipped_count += 1;
                    }
                    let c = clip_gradient(g, cfg.clip);
                    max_clipped = max_clipped.max(c.norm());
                    if c.norm() > cfg.clip * (1.0 + 1e-12) {
                        violations += 1;
                    }
                    accumulate(&mut sum, &c)?;
                }
            }
        }
        if violations > 0 {
            bail!(Numeric, "step {k}: {violations} clipped gradients exceed C = {}", cfg.clip);
        }
        let mut noise_rng = stream(cfg.seed, Purpose::Noise, &[k]);
        let (g, noise_norm) = finish_aggregate(sum, &template, cfg.sigma, cfg.clip, cfg.batch_size, &mut noise_rng)?;
        if trainable > 0 && cfg.lr != 0.0 {
            model.store.sgd_step(&g, cfg.lr)?;
        }
        self.ledger.record_step();

        let mut sorted = norms.clone();
        sorted.sort_by(f64::total_cmp);
        let pick = |f: f64| sorted.get(((sorted.len() as f64 - 1.0) * f).round() as usize).copied().unwrap_or(0.0);
        Ok(StepReport {
            step: k,
            batch: batch.len(),
            microbatches,
            norm_min: pick(0.0),
            norm_median: pick(0.5),
            norm_max: pick(1.0),
            clipped_fraction: if norms.is_empty() { 0.0 } else { clipped_count as f64 / norms.len() as f64 },
            max_clipped_norm: max_clipped,
            violations,
            noise_norm,
            trainable,
            loss: if norms.is_empty() { 0.0 } else { loss_sum / norms.len() as f64 },
        })
    }

    /// Run the remaining steps, handing each report to `on_step`.
    pub fn run(&mut self, model: &mut DiffusionModel, mut on_step: impl FnMut(&StepReport) -> Result<()>) -> Result<()> {
        while !self.done() {
            let r = self.step(model)?;
            on_step(&r)?;
        }
        Ok(())
    }
}

/// Full run of `cfg.steps` steps from scratch.
pub fn dp_sgd_run(
    model: &mut DiffusionModel,
    latents: &Tensor,
    labels: Option<&[usize]>,
    cfg: &DpConfig,
) -> Result<(Vec<StepReport>, PrivacyLedger)> {
    let mut trainer = DpTrainer::new(cfg.clone(), latents, labels)?;
    let mut reports = Vec::new();
    trainer.run(model, |r| {
        reports.push(r.clone());
        Ok(())
    })?;
    Ok((reports, trainer.ledger))
}

/// Trainable parameters as a share of the whole store.
pub fn trainable_fraction(store: &ParamStore) -> f64 {
    store.trainable_count() as f64 / store.total_count().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gm(vals: &[(&str, Vec<f64>)]) -> GradMap {
        let mut m = IndexMap::new();
        for (k, v) in vals {
            m.insert(k.to_string(), Tensor::new(&[v.len()], v.clone()).unwrap());
        }
        GradMap::new(m)
    }

    #[test]
    fn clipping_cases() {
        let g = gm(&[("a", vec![0.3, 0.4])]);
        let c = clip_gradient(g.clone(), 1.0);
        assert_eq!(c, g);
        let g = gm(&[("a", vec![3.0, 4.0]), ("b", vec![0.0])]);
        let c = clip_gradient(g, 2.5);
        assert!((c.norm() - 2.5).abs() < 1e-12);
        assert_eq!(clip_gradient(gm(&[("a", vec![1e300])]), f64::INFINITY).get("a").unwrap().data(), &[1e300]);
    }

    #[test]
    fn poisson_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(poisson_subsample(7, 1.0, &mut rng), (0..7).collect::<Vec<_>>());
        let a = poisson_subsample(1000, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        let b = poisson_subsample(1000, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_without_noise_is_mean_of_clipped() {
        let t = gm(&[("a", vec![0.0, 0.0])]);
        let one = gm(&[("a", vec![0.1, -0.2])]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, nn) = noisy_aggregate(&[one], &t, 0.0, 1.0, 4, &mut rng).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[0.1 / 4.0, -0.2 / 4.0]);
        assert_eq!(nn, 0.0);
        let (g, nn) = noisy_aggregate(&[], &t, 2.0, 0.5, 4, &mut rng).unwrap();
        assert!(nn > 0.0);
        assert!((g.norm() - nn / 4.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let cfg = DpConfig {
            batch_size: 4,
            clip: f64::INFINITY,
            sigma: 1.0,
            lr: 0.1,
            steps: 1,
            seed: 0,
            microbatch: 2,
            delta: 1e-5,
            research_mode: true,
        };
        assert!(cfg.validate(10).is_err());
        assert!(DpConfig { sigma: 0.0, ..cfg.clone() }.validate(10).is_ok());
        assert!(DpConfig { sigma: 0.0, ..cfg.clone() }.validate(3).is_err());
        assert!(DpConfig { sigma: 0.0, microbatch: 0, ..cfg }.validate(10).is_err());
        assert_eq!(DpConfig::steps_for_epochs(200, 60000, 2000), 6000);
        assert_eq!(DpConfig::steps_for_epochs(1, 10, 3), 4);
    }
}
