//! Fréchet distance between feature distributions, its privatized variant,
//! and a small reference classifier for downstream accuracy.

use crate::accountant::gaussian_mech_sigma;
use crate::autodiff::Tape;
use crate::error::{bail, Result};
use crate::optim::Adam;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::{stream, Purpose};
use crate::tensor::{conv2d, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Eigenvalues below this are lifted to it when repairing a privatized
/// covariance.
pub const PSD_FLOOR: f64 = 1e-8;

/// Fixed random conv net: three 3x3 convolutions with tanh, global average
/// pooling and L2 normalisation, so every feature vector has norm ≤ 1.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor, Tensor, usize)>,
    pub dim: usize,
}

impl FeatureExtractor {
    pub fn new(channels: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim > 64 {
            bail!(Config, "feature dimension {dim} outside 1..=64");
        }
        let mut rng = stream(seed, Purpose::Eval, &[0]);
        let widths = [channels, 16, 32, dim];
        let strides = [1, 2, 1];
        let layers = (0..3)
            .map(|i| {
                let (cin, cout) = (widths[i], widths[i + 1]);
                let w = Tensor::randn(&[cout, cin, 3, 3], (1.5 / (9 * cin) as f64).sqrt(), &mut rng);
                let b = Tensor::randn(&[cout], 0.1, &mut rng);
                (w, b, strides[i])
            })
            .collect();
        Ok(Self { layers, dim })
    }

    /// Features of `images[n, c, h, w]` as rows of an `[n, dim]` tensor.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        if images.ndim() != 4 {
            bail!(Dimension, "feature extractor expects [n, c, h, w], got {:?}", images.shape());
        }
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.dim);
        for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
            let mut x = images.select_rows(chunk);
            for (w, b, stride) in &self.layers {
                let mut y = conv2d(&x, w, *stride, 1)?;
                let (c, hw) = (y.shape()[1], y.shape()[2] * y.shape()[3]);
                for (idx, v) in y.data_mut().iter_mut().enumerate() {
                    *v = (*v + b.data()[(idx / hw) % c]).tanh();
                }
                x = y;
            }
            let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
            for s in 0..chunk.len() {
                let mut f: Vec<f64> = (0..c)
                    .map(|ch| x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                    .collect();
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    f.iter_mut().for_each(|v| *v /= norm);
                }
                out.extend(f);
            }
        }
        Tensor::new(&[n, self.dim], out)
    }
}

/// Neighbouring-dataset relation used for sensitivities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighboring {
    /// Replace one record: sensitivity `2/n`.
    Replace,
    /// Add or remove one record: sensitivity `1/n`.
    #[default]
    AddRemove,
}

impl Neighboring {
    pub fn sensitivity(self, n: usize) -> f64 {
        match self {
            Neighboring::Replace => 2.0 / n as f64,
            Neighboring::AddRemove => 1.0 / n as f64,
        }
    }
}

/// `(ε₁, δ₁)` for the mean and `(ε₂, δ₂)` for the second moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidBudget {
    pub eps_mean: f64,
    pub delta_mean: f64,
    pub eps_moment: f64,
    pub delta_moment: f64,
}

impl FidBudget {
    /// Even split of a total `(ε, δ)`.
    pub fn split(eps: f64, delta: f64) -> Self {
        Self { eps_mean: eps / 2.0, delta_mean: delta / 2.0, eps_moment: eps / 2.0, delta_moment: delta / 2.0 }
    }

    /// Composed guarantee `(ε₁+ε₂, δ₁+δ₂)`.
    pub fn total(&self) -> (f64, f64) {
        (self.eps_mean + self.eps_moment, self.delta_mean + self.delta_moment)
    }
}

/// Sufficient statistics `(n, μ, M_sec)` of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub n: usize,
    pub mu: Vec<f64>,
    /// Row-major `d×d` second moment `(1/n)·XᵀX`.
    pub m_sec: Vec<f64>,
    pub privatized: Option<FidBudget>,
}

impl FeatureStats {
    pub fn from_features(x: &Tensor) -> Result<Self> {
        if x.ndim() != 2 || x.shape()[0] == 0 {
            bail!(Data, "need a non-empty [n, d] feature matrix, got {:?}", x.shape());
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mu = vec![0.0; d];
        let mut m = vec![0.0; d * d];
        for r in 0..n {
            let row = &x.data()[r * d..(r + 1) * d];
            for i in 0..d {
                mu[i] += row[i];
                for j in 0..d {
                    m[i * d + j] += row[i] * row[j];
                }
            }
        }
        mu.iter_mut().for_each(|v| *v /= n as f64);
        m.iter_mut().for_each(|v| *v /= n as f64);
        Ok(Self { n, mu, m_sec: m, privatized: None })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `Σ = M_sec − μμᵀ`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut s = self.m_sec.clone();
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] -= self.mu[i] * self.mu[j];
            }
        }
        s
    }
}

/// Eigen-decomposition of a symmetric `d×d` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and row-major eigenvectors (columns).
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != d * d {
        bail!(Dimension, "matrix of {} entries is not {d}x{d}", a.len());
    }
    if a.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "non-finite matrix entry");
    }
    let mut m = a.to_vec();
    let mut v = Tensor::eye(d).into_data();
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * d + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..d).map(|i| m[i * d + i]).collect(), v))
}

fn rebuild(vals: &[f64], vecs: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += vecs[i * d + k] * vals[k] * vecs[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix. Slightly negative
/// eigenvalues from rounding are treated as zero.
pub fn sqrtm_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(a, d)?;
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    if vals.iter().any(|&v| v < -1e-9 * scale) {
        bail!(Numeric, "matrix is not positive semi-definite (eigenvalue {:e})", vals.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    let roots: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(rebuild(&roots, &vecs, d))
}

/// Lift eigenvalues below [`PSD_FLOOR`]; the matrix is returned untouched
/// when it already satisfies the floor.
pub fn repair_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(a, d)?;
    if vals.iter().all(|&v| v >= PSD_FLOOR) {
        return Ok(a.to_vec());
    }
    let lifted: Vec<f64> = vals.iter().map(|v| v.max(PSD_FLOOR)).collect();
    Ok(rebuild(&lifted, &vecs, d))
}

/// Fréchet distance between two Gaussians given by mean and covariance.
pub fn frechet_distance(mu0: &[f64], s0: &[f64], mu1: &[f64], s1: &[f64]) -> Result<f64> {
    let d = mu0.len();
    if mu1.len() != d || s0.len() != d * d || s1.len() != d * d {
        bail!(Dimension, "feature dimensions differ: {} vs {}", d, mu1.len());
    }
    let mean_term: f64 = mu0.iter().zip(mu1).map(|(a, b)| (a - b) * (a - b)).sum();
    let r0 = sqrtm_psd(s0, d)?;
    // r0 · s1 · r0 is symmetric PSD and shares its spectrum with s0·s1
    let mut tmp = vec![0.0; d * d];
    crate::tensor::gemm(&r0, s1, &mut tmp, d, d, d);
    let mut inner = vec![0.0; d * d];
    crate::tensor::gemm(&tmp, &r0, &mut inner, d, d, d);
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d)?;
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    if vals.iter().any(|&v| v < -1e-9 * scale) {
        bail!(Numeric, "cross term has a negative eigenvalue");
    }
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let tr0: f64 = (0..d).map(|i| s0[i * d + i]).sum();
    let tr1: f64 = (0..d).map(|i| s1[i * d + i]).sum();
    Ok((mean_term + tr0 + tr1 - 2.0 * tr_sqrt).max(0.0))
}

fn prepared_cov(s: &FeatureStats) -> Result<Vec<f64>> {
    let cov = s.covariance();
    if s.privatized.is_some() {
        repair_psd(&cov, s.dim())
    } else {
        Ok(cov)
    }
}

/// `‖μ₀−μ‖² + tr[Σ₀ + Σ − 2(Σ₀Σ)^{1/2}]`. Privatized statistics get their
/// covariance repaired first.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    frechet_distance(&a.mu, &prepared_cov(a)?, &b.mu, &prepared_cov(b)?)
}

/// `μ + N(0, (Δσ₁)²I)` with `σ₁` from the analytic Gaussian mechanism.
/// An infinite `eps` returns `mu` unchanged.
pub fn privatize_mean<R: Rng + ?Sized>(
    mu: &[f64],
    n: usize,
    eps: f64,
    delta: f64,
    neighboring: Neighboring,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        bail!(Data, "cannot privatize statistics of an empty set");
    }
    if eps.is_infinite() {
        return Ok(mu.to_vec());
    }
    let sd = gaussian_mech_sigma(neighboring.sensitivity(n), eps, delta)?;
    Ok(mu.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Noise on the `d(d+1)/2` upper-triangle entries (diagonal included),
/// copied to the mirrored lower-triangle entries.
pub fn privatize_second_moment<R: Rng + ?Sized>(
    m_sec: &[f64],
    d: usize,
    n: usize,
    eps: f64,
    delta: f64,
    neighboring: Neighboring,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m_sec.len() != d * d {
        bail!(Dimension, "second moment of {} entries is not {d}x{d}", m_sec.len());
    }
    if (0..d).any(|i| (0..i).any(|j| m_sec[i * d + j] != m_sec[j * d + i])) {
        bail!(Contract, "second moment is not symmetric");
    }
    if n == 0 {
        bail!(Data, "cannot privatize statistics of an empty set");
    }
    if eps.is_infinite() {
        return Ok(m_sec.to_vec());
    }
    let sd = gaussian_mech_sigma(neighboring.sensitivity(n), eps, delta)?;
    let mut out = m_sec.to_vec();
    for i in 0..d {
        for j in i..d {
            let z = sd * rng.sample::<f64, _>(StandardNormal);
            out[i * d + j] = m_sec[i * d + j] + z;
            if i != j {
                out[j * d + i] = m_sec[j * d + i] + z;
            }
        }
    }
    Ok(out)
}

/// Options of one DP-FID evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpFidOptions {
    pub budget: FidBudget,
    pub neighboring: Neighboring,
    /// Release only the perturbed mean difference; the whole budget goes to
    /// the mean.
    pub mean_only: bool,
    /// Skip the noise entirely. A test hook; the result is not private.
    pub zero_noise: bool,
}

/// Result of a DP-FID evaluation with its composed budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpFid {
    pub value: f64,
    pub eps: f64,
    pub delta: f64,
}

/// Fréchet distance between privatized statistics of a private set and raw
/// statistics of a public set.
pub fn dp_fid<R: Rng + ?Sized>(
    private: &FeatureStats,
    public: &FeatureStats,
    opts: &DpFidOptions,
    rng: &mut R,
) -> Result<DpFid> {
    if private.dim() != public.dim() {
        bail!(Dimension, "feature dimensions differ: {} vs {}", private.dim(), public.dim());
    }
    let b = &opts.budget;
    if opts.mean_only {
        let (eps, delta) = (b.eps_mean, b.delta_mean);
        let mu = if opts.zero_noise {
            private.mu.clone()
        } else {
            privatize_mean(&private.mu, private.n, eps, delta, opts.neighboring, rng)?
        };
        let value = mu.iter().zip(&public.mu).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(DpFid { value, eps, delta });
    }
    let (eps, delta) = b.total();
    let value = if opts.zero_noise {
        fid(private, public)?
    } else {
        let d = private.dim();
        let mu = privatize_mean(&private.mu, private.n, b.eps_mean, b.delta_mean, opts.neighboring, rng)?;
        let m_sec = privatize_second_moment(&private.m_sec, d, private.n, b.eps_moment, b.delta_moment, opts.neighboring, rng)?;
        let noisy = FeatureStats { n: private.n, mu, m_sec, privatized: Some(*b) };
        fid(&noisy, public)?
    };
    Ok(DpFid { value, eps, delta })
}

/// Settings of the reference classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub width: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 0.01, width: 8, seed: 0 }
    }
}

fn classifier_logits(tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<crate::autodiff::Var> {
    let xv = tape.leaf(x.clone());
    let w1 = tape.param_from(store, "c1.w")?;
    let b1 = tape.param_from(store, "c1.b")?;
    let h = tape.conv2d(xv, w1, 1, 1)?;
    let h = tape.add_channel(h, b1)?;
    let h = tape.silu(h);
    let w2 = tape.param_from(store, "c2.w")?;
    let b2 = tape.param_from(store, "c2.b")?;
    let h = tape.conv2d(h, w2, 2, 1)?;
    let h = tape.add_channel(h, b2)?;
    let h = tape.silu(h);
    let pooled = tape.global_avg_pool(h)?;
    let w3 = tape.param_from(store, "fc.w")?;
    let b3 = tape.param_from(store, "fc.b")?;
    tape.linear(pooled, w3, Some(b3))
}

/// Train the reference CNN on `(train_x, train_y)` and report accuracy on
/// `(test_x, test_y)`.
pub fn train_eval_classifier(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<f64> {
    if train_x.ndim() != 4 || train_x.shape()[0] != train_y.len() || test_x.shape().first() != Some(&test_y.len()) {
        bail!(Data, "classifier data and labels disagree in size");
    }
    if test_y.is_empty() {
        bail!(Data, "empty test set");
    }
    let mut seen: Vec<usize> = train_y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        bail!(Data, "training labels cover {} class(es); need at least 2", seen.len());
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y >= num_classes) {
        bail!(Data, "label {bad} outside 0..{num_classes}");
    }
    let ch = train_x.shape()[1];
    let w = cfg.width;
    let mut rng = stream(cfg.seed, Purpose::Init, &[0xC1A5]);
    let mut store = ParamStore::new();
    let g = ParamGroup::Backbone;
    store.insert("c1.w", Tensor::randn(&[w, ch, 3, 3], (2.0 / (9 * ch) as f64).sqrt(), &mut rng), g, true)?;
    store.insert("c1.b", Tensor::zeros(&[w]), g, true)?;
    store.insert("c2.w", Tensor::randn(&[2 * w, w, 3, 3], (2.0 / (9 * w) as f64).sqrt(), &mut rng), g, true)?;
    store.insert("c2.b", Tensor::zeros(&[2 * w]), g, true)?;
    store.insert("fc.w", Tensor::randn(&[num_classes, 2 * w], (1.0 / (2 * w) as f64).sqrt(), &mut rng), g, true)?;
    store.insert("fc.b", Tensor::zeros(&[num_classes]), g, true)?;
    let mut opt = Adam::new(cfg.lr);
    let n = train_y.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut stream(cfg.seed, Purpose::Batches, &[epoch as u64, 0xC1A5]));
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let x = train_x.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let logits = classifier_logits(&mut tape, &store, &x)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let grads = tape.backward_for(loss, &store)?;
            opt.step(&mut store, &grads)?;
        }
    }
    let mut correct = 0;
    for idx in (0..test_y.len()).collect::<Vec<_>>().chunks(128) {
        let mut tape = Tape::new();
        let logits = classifier_logits(&mut tape, &store, &test_x.select_rows(idx))?;
        let l = tape.value(logits);
        for (r, &i) in idx.iter().enumerate() {
            let row = &l.data()[r * num_classes..(r + 1) * num_classes];
            let pred = (0..num_classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            if pred == test_y[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test_y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stats(n: usize, d: usize, shift: f64, seed: u64) -> FeatureStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng).map(|v| v + shift);
        FeatureStats::from_features(&x).unwrap()
    }

    #[test]
    fn identical_stats_have_zero_distance() {
        let s = random_stats(200, 6, 0.0, 1);
        assert!(fid(&s, &s).unwrap().abs() < 1e-8);
    }

    #[test]
    fn identity_covariances() {
        let eye = Tensor::eye(3).into_data();
        let d = frechet_distance(&[0.0, 0.0, 0.0], &eye, &[2.0, 0.0, 0.0], &eye).unwrap();
        assert!((d - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let s = random_stats(50, 8, 0.0, 2).covariance();
        let r = sqrtm_psd(&s, 8).unwrap();
        let mut sq = vec![0.0; 64];
        crate::tensor::gemm(&r, &r, &mut sq, 8, 8, 8);
        let err: f64 = sq.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-8);
    }

    #[test]
    fn symmetric_and_mirrored_noise() {
        let s = random_stats(40, 5, 0.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = privatize_second_moment(&s.m_sec, 5, 40, 1.0, 1e-5, Neighboring::Replace, &mut rng).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let di = m[i * 5 + j] - s.m_sec[i * 5 + j];
                let dj = m[j * 5 + i] - s.m_sec[j * 5 + i];
                assert_eq!(di.to_bits(), dj.to_bits());
            }
        }
        let same = privatize_second_moment(&s.m_sec, 5, 40, f64::INFINITY, 1e-5, Neighboring::Replace, &mut rng).unwrap();
        assert_eq!(same, s.m_sec);
    }

    #[test]
    fn zero_noise_matches_plain_fid() {
        let a = random_stats(100, 4, 0.0, 5);
        let b = random_stats(100, 4, 0.3, 6);
        let opts = DpFidOptions {
            budget: FidBudget::split(1.0, 1e-5),
            neighboring: Neighboring::AddRemove,
            mean_only: false,
            zero_noise: true,
        };
        let r = dp_fid(&a, &b, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.value, fid(&a, &b).unwrap());
        assert_eq!((r.eps, r.delta), (1.0, 1e-5));
    }

    #[test]
    fn features_are_bounded() {
        let fx = FeatureExtractor::new(1, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let imgs = Tensor::randn(&[5, 1, 16, 16], 1.0, &mut rng);
        let f = fx.extract(&imgs).unwrap();
        for r in 0..5 {
            let n: f64 = f.data()[r * 16..(r + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= 1.0 + 1e-12);
        }
        assert!(FeatureExtractor::new(1, 65, 3).is_err());
    }

    #[test]
    fn classifier_rejects_single_class() {
        let x = Tensor::zeros(&[4, 1, 4, 4]);
        assert!(matches!(
            train_eval_classifier(&x, &[1, 1, 1, 1], &x, &[1, 1, 1, 1], 2, &ClassifierConfig::default()),
            Err(crate::Error::Data(_))
        ));
    }
}
