//! Reference implementations shared by the integration tests and the
//! acceptance harness. None of these call into the code they check beyond
//! the plumbing needed to feed it inputs.
#![allow(dead_code)]

use dpldm::autodiff::{Tape, Var};
use dpldm::diffusion::unet::UNetConfig;
use dpldm::diffusion::{ldm_loss, DiffusionModel};
use dpldm::params::ParamStore;
use dpldm::rng::{stream, Purpose};
use dpldm::tensor::Tensor;
use dpldm::Result;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ε_α` of the Poisson-subsampled Gaussian by direct numerical integration
/// of `E_{z~N(0,σ²)}[(1 − q + q·e^{(2z−1)/(2σ²)})^α]`. Trapezoid rule in
/// log space; the integrand is analytic with Gaussian tails, so the rule
/// converges geometrically in the step.
pub fn rdp_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let log_f = |z: f64| {
        let a = (2.0 * z - 1.0) / (2.0 * s2);
        let inner = if q >= 1.0 { a } else { log_add((-q).ln_1p(), q.ln() + a) };
        norm - z * z / (2.0 * s2) + alpha * inner
    };
    let (lo, hi) = (-30.0 * sigma - 1.0, alpha + 30.0 * sigma + 1.0);
    let h = sigma / 200.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let vals: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Neumaier summation of the shifted terms
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let x = w * (v - peak).exp();
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    (peak + (h * (sum + comp)).ln()) / (alpha - 1.0)
}

/// Privacy profile of the Gaussian mechanism with standard deviation `sd`
/// on a sensitivity-`sens` query: the exact `δ(ε)`.
pub fn gaussian_delta(sd: f64, sens: f64, eps: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).unwrap();
    let a = sens / (2.0 * sd);
    let b = eps * sd / sens;
    phi.cdf(a - b) - eps.exp() * phi.cdf(-a - b)
}

/// Smallest standard deviation whose `δ(ε)` is at most `delta`, by
/// bisection on the privacy profile (decreasing in `sd`).
pub fn gaussian_sigma_oracle(sens: f64, eps: f64, delta: f64) -> f64 {
    let (mut lo, mut hi) = (1e-6 * sens, sens);
    while gaussian_delta(hi, sens, eps) > delta {
        hi *= 2.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if gaussian_delta(mid, sens, eps) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Mean and population covariance of the rows of `x[n, d]`, computed from
/// centred rows.
pub fn mean_cov(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu: Vec<f64> = (0..d).map(|j| m.column(j).sum() / n as f64).collect();
    let mut c = m.clone();
    for j in 0..d {
        for i in 0..n {
            c[(i, j)] -= mu[j];
        }
    }
    (mu, c.transpose() * &c / n as f64)
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians, with the trace term taken from
/// the eigenvalues of `S₀^{1/2} S₁ S₀^{1/2}`.
pub fn frechet_oracle(mu0: &[f64], s0: &DMatrix<f64>, mu1: &[f64], s1: &DMatrix<f64>) -> f64 {
    let r = psd_sqrt(s0);
    let m = &r * s1 * &r;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm: f64 = mu0.iter().zip(mu1).map(|(a, b)| (a - b) * (a - b)).sum();
    dm + s0.trace() + s1.trace() - 2.0 * tr_sqrt
}

pub fn fid_oracle(x: &Tensor, y: &Tensor) -> f64 {
    let (m0, s0) = mean_cov(x);
    let (m1, s1) = mean_cov(y);
    frechet_oracle(&m0, &s0, &m1, &s1)
}

/// Multi-head `softmax(QKᵀ/√d_k)V` by explicit loops. `psi[b, n, d]`,
/// `ctx[b, m, e]`, weights row-major `[d_out, d_in]`. Head `h` owns output
/// channels `h·d_k..(h+1)·d_k`.
#[allow(clippy::too_many_arguments)]
pub fn attention_loop(
    psi: &[f64],
    ctx: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    dims: (usize, usize, usize, usize, usize),
    heads: usize,
) -> Vec<f64> {
    let (b, n, m, d, e) = dims;
    let dk = d / heads;
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        let proj = |w: &[f64], src: &[f64], rows: usize, width: usize| {
            let mut p = vec![0.0; rows * d];
            for r in 0..rows {
                for o in 0..d {
                    let mut acc = 0.0;
                    for i in 0..width {
                        acc += w[o * width + i] * src[(bi * rows + r) * width + i];
                    }
                    p[r * d + o] = acc;
                }
            }
            p
        };
        let q = proj(wq, psi, n, d);
        let k = proj(wk, ctx, m, e);
        let v = proj(wv, ctx, m, e);
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; m];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..dk {
                        acc += q[i * d + h * dk + c] * k[j * d + h * dk + c];
                    }
                    *s = acc / (dk as f64).sqrt();
                }
                let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = w.iter().sum();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += w[j] / z * v[j * d + h * dk + c];
                    }
                    out[(bi * n + i) * d + h * dk + c] = acc;
                }
            }
        }
    }
    out
}

/// Plain minibatch SGD on the noise-prediction loss: for each step, the
/// Poisson batch drawn from the step's stream, per-sample losses keyed by
/// `(step, index)`, gradients summed in batch order, divided by the
/// expected batch size and subtracted. No clipping, no noise.
#[allow(clippy::too_many_arguments)]
pub fn plain_sgd(
    model: &DiffusionModel,
    latents: &Tensor,
    labels: Option<&[usize]>,
    seed: u64,
    batch_size: usize,
    lr: f64,
    steps: u64,
) -> Result<ParamStore> {
    let mut m = model.clone();
    let n = latents.shape()[0];
    let q = batch_size as f64 / n as f64;
    for k in 0..steps {
        let mut rng = stream(seed, Purpose::Poisson, &[k]);
        let batch: Vec<usize> = (0..n).filter(|_| rng.gen::<f64>() < q).collect();
        let mut sums: Vec<(String, Vec<f64>)> =
            m.store.iter().filter(|(_, p)| p.trainable).map(|(k, p)| (k.to_string(), vec![0.0; p.value.numel()])).collect();
        for &i in &batch {
            let mut tape = Tape::new();
            let z0 = latents.select_rows(&[i]);
            let y = labels.map(|l| [l[i]]);
            let mut lrng = stream(seed, Purpose::SampleLoss, &[k, i as u64]);
            let loss = ldm_loss(&mut tape, &m, &m.schedule, &z0, y.as_ref().map(|y| &y[..]), &mut lrng)?;
            let g = tape.backward_for(loss, &m.store)?;
            for (name, acc) in sums.iter_mut() {
                for (a, v) in acc.iter_mut().zip(g.get(name).expect("gradient present").data()) {
                    *a += v;
                }
            }
        }
        for (name, acc) in &sums {
            let p = m.store.get_mut(name).expect("param present");
            for (w, s) in p.value.data_mut().iter_mut().zip(acc) {
                *w -= lr * (s / batch_size as f64);
            }
        }
    }
    Ok(m.store)
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn weights_like(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.4).sin()).collect()).unwrap()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `Σ w ⊙ op(inputs)` with fixed weights `w`.
pub fn fd_check_op(inputs: &[Tensor], op: &Build) -> Result<f64> {
    let scalar = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = op(tape, vars)?;
        let w = tape.leaf(weights_like(&tape.shape(out).to_vec()));
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let loss = scalar(&mut tape, &vars)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad_of(loss, vars[k])?;
        for i in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut t2 = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        t2.leaf(t)
                    })
                    .collect();
                let l = scalar(&mut t2, &vs)?;
                Ok(t2.value(l).item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of every differentiable op. Returns the worst
/// relative error per op.
pub fn op_gradient_suite() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = stream(11, Purpose::Eval, &[0xFD]);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let pos = |t: Tensor| t.map(|v| v.abs() + 0.5);
    let cases: Vec<(&'static str, Vec<Tensor>, Box<Build>)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![r(&[2, 3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![r(&[4])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_channel", vec![r(&[2, 3, 2, 2]), r(&[3])], Box::new(|t, v| t.add_channel(v[0], v[1]))),
        ("linear", vec![r(&[2, 5, 4]), r(&[3, 4]), r(&[3])], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("linear_nobias", vec![r(&[3, 4]), r(&[2, 4])], Box::new(|t, v| t.linear(v[0], v[1], None))),
        ("conv2d", vec![r(&[2, 2, 5, 5]), r(&[3, 2, 3, 3])], Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1))),
        ("conv2d_stride2", vec![r(&[1, 2, 6, 6]), r(&[3, 2, 3, 3])], Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1))),
        ("conv2d_1x1", vec![r(&[1, 3, 3, 3]), r(&[2, 3, 1, 1])], Box::new(|t, v| t.conv2d(v[0], v[1], 1, 0))),
        ("silu", vec![r(&[7])], Box::new(|t, v| Ok(t.silu(v[0])))),
        ("tanh", vec![r(&[7])], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("softmax_last", vec![r(&[2, 3, 4])], Box::new(|t, v| t.softmax(v[0], 2))),
        ("softmax_mid", vec![r(&[2, 3, 4])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("upsample2x", vec![r(&[1, 2, 3, 3])], Box::new(|t, v| t.upsample2x(v[0]))),
        ("concat_channels", vec![r(&[2, 2, 2, 2]), r(&[2, 1, 2, 2])], Box::new(|t, v| t.concat_channels(v[0], v[1]))),
        ("to_tokens", vec![r(&[2, 3, 2, 2])], Box::new(|t, v| t.to_tokens(v[0]))),
        ("from_tokens", vec![r(&[2, 6, 3])], Box::new(|t, v| t.from_tokens(v[0], 2, 3))),
        ("split_heads", vec![r(&[2, 3, 4])], Box::new(|t, v| t.split_heads(v[0], 2))),
        ("merge_heads", vec![r(&[4, 3, 2])], Box::new(|t, v| t.merge_heads(v[0], 2))),
        ("gather", vec![r(&[5, 3])], Box::new(|t, v| t.gather(v[0], &[0, 2, 2, 4]))),
        ("reshape", vec![r(&[2, 6])], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("sum", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("mse", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("global_avg_pool", vec![r(&[2, 3, 2, 3])], Box::new(|t, v| t.global_avg_pool(v[0]))),
        ("cross_entropy", vec![r(&[4, 3])], Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]))),
        (
            "chain",
            vec![pos(r(&[2, 3])), r(&[3, 3])],
            Box::new(|t, v| {
                let h = t.linear(v[0], v[1], None)?;
                let h = t.tanh(h);
                let s = t.softmax(h, 1)?;
                t.mul(s, v[0])
            }),
        ),
    ];
    cases.into_iter().map(|(name, inputs, op)| Ok((name, fd_check_op(&inputs, op.as_ref())?))).collect()
}

/// A small conditional UNet with every parameter trainable.
pub fn tiny_unet() -> UNetConfig {
    UNetConfig {
        latent_channels: 2,
        latent_size: 4,
        channels: [4, 8],
        time_dim: 8,
        heads: 2,
        num_classes: 2,
        cond_dim: 4,
        null_class: false,
    }
}

/// Central differences of the full noise-prediction loss against every
/// parameter of a small UNet. Returns the worst relative error and the
/// number of scalars checked.
pub fn unet_loss_fd(model: &DiffusionModel) -> Result<(f64, usize)> {
    let z0 = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut stream(5, Purpose::Eval, &[0]));
    let y = [0usize, 1];
    let loss_of = |m: &DiffusionModel| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let mut rng = stream(5, Purpose::SampleLoss, &[0]);
        let l = ldm_loss(&mut tape, m, &m.schedule, &z0, Some(&y), &mut rng)?;
        Ok((tape, l))
    };
    let (tape, loss) = loss_of(model)?;
    let grads = tape.backward_for(loss, &model.store)?;
    let mut m = model.clone();
    let h = 1e-5;
    let (mut worst, mut count) = (0.0f64, 0);
    let names: Vec<String> = model.store.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name).expect("all parameters trainable").clone();
        for i in 0..g.numel() {
            let orig = m.store.get(&name).unwrap().value.data()[i];
            let mut at = |v: f64| -> Result<f64> {
                m.store.get_mut(&name).unwrap().value.data_mut()[i] = v;
                let (t, l) = loss_of(&m)?;
                Ok(t.value(l).item())
            };
            let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            m.store.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Compare [`AttentionModule::attention_forward`] with [`attention_loop`]
/// on `cases` random shapes, half self- and half cross-attention. Returns
/// the largest absolute difference.
///
/// [`AttentionModule::attention_forward`]: dpldm::diffusion::attention::AttentionModule::attention_forward
pub fn attention_oracle_error(cases: usize, seed: u64) -> Result<f64> {
    use dpldm::diffusion::attention::{AttentionKind, AttentionModule, BlockLocation};
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = stream(seed, Purpose::Eval, &[0xA7, c as u64]);
        let heads = rng.gen_range(1..=3);
        let d = heads * rng.gen_range(1..=3);
        let (b, n) = (rng.gen_range(1..=3), rng.gen_range(1..=6));
        let cross = c % 2 == 1;
        let (m, e) = if cross { (rng.gen_range(1..=5), rng.gen_range(1..=4)) } else { (n, d) };
        let kind = if cross { AttentionKind::Cross } else { AttentionKind::SelfAttention };
        let module = AttentionModule { index: 1, location: BlockLocation::Middle, kind, channels: d, cond_dim: e, heads };
        let mut store = ParamStore::new();
        module.register(&mut store, &mut rng)?;
        let psi = Tensor::randn(&[b, n, d], 1.0, &mut rng);
        let ctx = if cross { Tensor::randn(&[b, m, e], 1.0, &mut rng) } else { psi.clone() };
        let mut tape = Tape::new();
        let pv = tape.leaf(psi.clone());
        let cv = if cross { Some(tape.leaf(ctx.clone())) } else { None };
        let out = module.attention_forward(&mut tape, &store, None, pv, cv)?;
        let sub = if cross { "cross" } else { "self" };
        let w = |x: &str| store.get(&module.weight_name(sub, x)).unwrap().value.data().to_vec();
        let want = attention_loop(psi.data(), ctx.data(), &w("w_q"), &w("w_k"), &w("w_v"), (b, n, m, d, e), heads);
        let got = tape.value(out);
        assert_eq!(got.shape(), &[b, n, d]);
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    Ok(worst)
}

/// Largest change of the mean (ℓ₂) and of the second moment (Frobenius)
/// over every single-element replacement in an `n`-point set of unit
/// vectors. Candidates for the replacement are the other points, the
/// antipode of the replaced point and a few random unit vectors.
pub fn swap_sensitivity(n: usize, d: usize, seed: u64) -> Result<(f64, f64)> {
    use dpldm::fid::FeatureStats;
    let mut rng = stream(seed, Purpose::Eval, &[0x5A]);
    let mut unit = || {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let points: Vec<Vec<f64>> = (0..n).map(|_| unit()).collect();
    let extra: Vec<Vec<f64>> = (0..8).map(|_| unit()).collect();
    let stats = |pts: &[Vec<f64>]| -> Result<FeatureStats> {
        FeatureStats::from_features(&Tensor::new(&[pts.len(), d], pts.concat())?)
    };
    let base = stats(&points)?;
    let (mut dm, mut dsec) = (0.0f64, 0.0f64);
    for i in 0..n {
        let anti: Vec<f64> = points[i].iter().map(|x| -x).collect();
        let candidates = points.iter().chain(&extra).chain(std::iter::once(&anti));
        for cand in candidates {
            let mut swapped = points.clone();
            swapped[i] = cand.clone();
            let s = stats(&swapped)?;
            let m: f64 = s.mu.iter().zip(&base.mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let f: f64 = s.m_sec.iter().zip(&base.m_sec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dm = dm.max(m);
            dsec = dsec.max(f);
        }
    }
    Ok((dm, dsec))
}

/// Monte Carlo check of `q(z_t | z_0) = N(√ᾱ_t z_0, (1 − ᾱ_t) I)`: for each
/// element the sample mean and variance, standardised by their standard
/// errors. Returns the largest |z-score| over elements and both moments.
pub fn q_sample_zscores(
    schedule: &dpldm::diffusion::schedule::NoiseSchedule,
    z0: &Tensor,
    t: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let d = z0.numel();
    let mut rng = stream(seed, Purpose::Eval, &[0x95, t as u64]);
    let (mut s1, mut s2) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..draws {
        let noise = Tensor::randn(z0.shape(), 1.0, &mut rng);
        let zt = schedule.q_sample(z0, t, &noise)?;
        for (j, v) in zt.data().iter().enumerate() {
            s1[j] += v;
            s2[j] += v * v;
        }
    }
    let ab = schedule.alpha_bar(t);
    let var = 1.0 - ab;
    let nf = draws as f64;
    let mut worst = 0.0f64;
    for j in 0..d {
        let mean = s1[j] / nf;
        let sample_var = (s2[j] - nf * mean * mean) / (nf - 1.0);
        let z_mean = (mean - ab.sqrt() * z0.data()[j]) / (var / nf).sqrt();
        let z_var = (sample_var - var) / (var * (2.0 / (nf - 1.0)).sqrt());
        worst = worst.max(z_mean.abs()).max(z_var.abs());
    }
    Ok(worst)
}
