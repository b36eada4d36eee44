//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism, and
//! the analytic calibration of a single Gaussian mechanism.

use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Fractional orders bounded above by the value at order 2.
pub const FRACTIONAL_ORDERS: [f64; 3] = [1.25, 1.5, 1.75];
pub const MAX_ORDER: u32 = 256;

/// The default order grid: `{1.25, 1.5, 1.75} ∪ {2, …, 256}`.
pub fn default_orders() -> Vec<f64> {
    FRACTIONAL_ORDERS.iter().copied().chain((2..=MAX_ORDER).map(f64::from)).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    statrs::function::factorial::ln_binomial(u64::from(n), u64::from(k))
}

fn rdp_integer(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 1.0 {
        return f64::from(alpha) / (2.0 * sigma * sigma);
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = f64::from(k);
        let term = ln_binomial(alpha, k)
            + kf * lq
            + f64::from(alpha - k) * l1q
            + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    (acc / f64::from(alpha - 1)).max(0.0)
}

/// Per-step RDP `ε_α` of the Gaussian mechanism with noise multiplier
/// `sigma` applied to a Poisson sample with rate `q`.
///
/// Integer orders use the exact binomial expansion of the moment
/// `E[(1 − q + q·e^{(2X−1)/(2σ²)})^α]`, summed in log space. Non-integer
/// orders are bounded by the next integer order above them, which is valid
/// because `ε_α` is non-decreasing in `α`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        bail!(Contract, "Rényi order must be finite and > 1, got {alpha}");
    }
    if !(q > 0.0 && q <= 1.0) {
        bail!(Contract, "sampling rate {q} outside (0, 1]");
    }
    if !(sigma > 0.0) {
        bail!(Contract, "noise multiplier must be positive, got {sigma}");
    }
    let ceil = alpha.ceil();
    if ceil > f64::from(u32::MAX) {
        bail!(Contract, "order {alpha} too large");
    }
    Ok(rdp_integer(q, sigma, ceil as u32))
}

/// RDP values over a grid of orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub values: Vec<f64>,
}

/// How RDP is turned into an `(ε, δ)` statement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    /// `ε = rdp + log(1/δ)/(α−1)`.
    Classic,
    /// `ε = rdp − (log δ + log α)/(α−1) + log((α−1)/α)`, the tighter bound
    /// used by the common DP-SGD libraries.
    #[default]
    Improved,
}

impl Conversion {
    fn apply(self, rdp: f64, alpha: f64, delta: f64) -> f64 {
        match self {
            Conversion::Classic => rdp + (1.0 / delta).ln() / (alpha - 1.0),
            Conversion::Improved => {
                rdp - (delta.ln() + alpha.ln()) / (alpha - 1.0) + ((alpha - 1.0) / alpha).ln()
            }
        }
    }
}

impl RdpCurve {
    /// Per-step curve of the subsampled Gaussian over `orders`.
    pub fn subsampled_gaussian(q: f64, sigma: f64, orders: &[f64]) -> Result<Self> {
        let values = orders.iter().map(|&a| rdp_subsampled_gaussian(q, sigma, a)).collect::<Result<_>>()?;
        Ok(Self { orders: orders.to_vec(), values })
    }

    /// Composition over `steps` identical steps.
    pub fn compose(&self, steps: u64) -> Self {
        Self { orders: self.orders.clone(), values: self.values.iter().map(|v| v * steps as f64).collect() }
    }

    /// Smallest `ε` over the grid at the given `δ`, with the order that
    /// attains it.
    pub fn epsilon(&self, delta: f64, conversion: Conversion) -> Result<(f64, f64)> {
        if !(delta > 0.0 && delta < 1.0) {
            bail!(Contract, "delta {delta} outside (0, 1)");
        }
        let mut best = (f64::INFINITY, f64::NAN);
        for (&a, &v) in self.orders.iter().zip(&self.values) {
            let eps = conversion.apply(v, a, delta);
            if eps < best.0 {
                best = (eps, a);
            }
        }
        if best.1.is_nan() {
            bail!(Contract, "empty order grid");
        }
        Ok((best.0.max(0.0), best.1))
    }
}

/// `ε` after `steps` iterations of the subsampled Gaussian.
pub fn epsilon_at_delta(q: f64, sigma: f64, steps: u64, delta: f64, conversion: Conversion) -> Result<f64> {
    let curve = RdpCurve::subsampled_gaussian(q, sigma, &default_orders())?;
    Ok(curve.compose(steps).epsilon(delta, conversion)?.0)
}

/// Lowest `ε` any noise level can reach: the conversion evaluated at zero
/// RDP.
pub fn epsilon_floor(delta: f64, conversion: Conversion) -> Result<f64> {
    let orders = default_orders();
    let zero = RdpCurve { values: vec![0.0; orders.len()], orders };
    Ok(zero.epsilon(delta, conversion)?.0)
}

/// Noise multiplier for which `steps` subsampled-Gaussian steps give
/// `target_eps` at `delta`, to `1e-4` relative accuracy in `ε`.
pub fn calibrate_sigma(q: f64, steps: u64, delta: f64, target_eps: f64, conversion: Conversion) -> Result<f64> {
    if !(target_eps > 0.0) {
        bail!(Calibration, "target epsilon must be positive, got {target_eps}");
    }
    let floor = epsilon_floor(delta, conversion)?;
    if steps > 0 && target_eps <= floor * (1.0 + 1e-4) {
        bail!(Calibration, "target epsilon {target_eps} is below the reachable floor {floor:.4}");
    }
    if steps == 0 {
        bail!(Calibration, "no steps to calibrate");
    }
    let eps = |s: f64| epsilon_at_delta(q, s, steps, delta, conversion);
    let (mut lo, mut hi) = (1.0, 1.0);
    let (mut e_lo, mut e_hi) = (eps(lo)?, eps(hi)?);
    while e_hi > target_eps {
        hi *= 2.0;
        e_hi = eps(hi)?;
        if hi > 1e8 {
            bail!(Calibration, "no noise level reaches epsilon {target_eps}");
        }
    }
    while e_lo < target_eps {
        lo /= 2.0;
        e_lo = eps(lo)?;
        if lo < 1e-6 {
            bail!(Calibration, "target epsilon {target_eps} needs vanishing noise");
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = eps(mid)?;
        if e > e_lo || e < e_hi {
            bail!(Numeric, "epsilon not monotone in sigma near {mid}");
        }
        if ((e - target_eps) / target_eps).abs() < 1e-4 {
            return Ok(mid);
        }
        if e > target_eps {
            lo = mid;
            e_lo = e;
        } else {
            hi = mid;
            e_hi = e;
        }
    }
    bail!(Calibration, "bisection did not converge for epsilon {target_eps}")
}

/// Everything needed to recompute the guarantee of a DP-SGD run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub clip: f64,
    #[serde(default)]
    pub conversion: Conversion,
}

impl PrivacyLedger {
    pub fn new(q: f64, sigma: f64, delta: f64, clip: f64) -> Self {
        Self { q, sigma, steps: 0, delta, clip, conversion: Conversion::default() }
    }

    pub fn record_step(&mut self) {
        self.steps += 1;
    }

    /// `ε` for the executed steps; infinite when no noise is added.
    pub fn epsilon(&self) -> Result<f64> {
        if self.sigma == 0.0 {
            if self.steps > 0 {
                return Ok(f64::INFINITY);
            }
            return epsilon_floor(self.delta, self.conversion);
        }
        epsilon_at_delta(self.q, self.sigma, self.steps, self.delta, self.conversion)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Noise standard deviation of the analytic Gaussian mechanism: the
/// smallest `σ` for which adding `N(0, σ²)` to an `ℓ₂`-sensitivity-`Δ`
/// query is `(ε, δ)`-DP.
pub fn gaussian_mech_sigma(sensitivity: f64, eps: f64, delta: f64) -> Result<f64> {
    if !(sensitivity > 0.0 && eps > 0.0 && delta > 0.0 && delta < 1.0) {
        bail!(Contract, "need Δ > 0, ε > 0, δ ∈ (0,1); got {sensitivity}, {eps}, {delta}");
    }
    let e = eps.exp();
    let b_minus = |v: f64| normal_cdf((eps * v).sqrt()) - e * normal_cdf(-(eps * (v + 2.0)).sqrt());
    let b_plus = |u: f64| normal_cdf(-(eps * u).sqrt()) - e * normal_cdf(-(eps * (u + 2.0)).sqrt());
    let threshold = b_minus(0.0);
    let alpha = if delta >= threshold {
        // largest v with b_minus(v) <= delta; b_minus increases in v
        let mut hi = 1.0;
        while b_minus(hi) <= delta {
            hi *= 2.0;
        }
        let v = bisect(0.0, hi, |v| b_minus(v) <= delta);
        (1.0 + v / 2.0).sqrt() - (v / 2.0).sqrt()
    } else {
        // smallest u with b_plus(u) <= delta; b_plus decreases in u
        let mut hi = 1.0;
        while b_plus(hi) > delta {
            hi *= 2.0;
        }
        let u = bisect(0.0, hi, |u| b_plus(u) > delta);
        (1.0 + u / 2.0).sqrt() + (u / 2.0).sqrt()
    };
    Ok(alpha * sensitivity / (2.0 * eps).sqrt())
}

/// Boundary of a predicate that holds on `[lo, x*)` and fails on `(x*, hi]`.
fn bisect(mut lo: f64, mut hi: f64, holds: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
