//! Privacy cost of a DP-SGD run, with both RDP-to-(ε, δ) conversions.
//!
//! cargo run --example privacy_accounting -- [q] [sigma] [steps] [delta]

use dpldm::accountant::{epsilon_at_delta, Conversion, RdpCurve};

fn arg(i: usize, default: f64) -> f64 {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> dpldm::Result<()> {
    let q = arg(1, 2000.0 / 60000.0);
    let sigma = arg(2, 1.47);
    let steps = arg(3, 6000.0) as u64;
    let delta = arg(4, 1e-5);

    let curve = RdpCurve::subsampled_gaussian(q, sigma, &dpldm::accountant::default_orders())?.compose(steps);
    for conversion in [Conversion::Improved, Conversion::Classic] {
        let (eps, order) = curve.epsilon(delta, conversion)?;
        println!("{conversion:?}: ε = {eps:.4} at order α = {order}");
    }
    println!("q = {q:.5}, σ = {sigma}, {steps} steps, δ = {delta:e}");
    // a cheaper run at the same noise level
    let half = epsilon_at_delta(q, sigma, steps / 2, delta, Conversion::Improved)?;
    println!("half the steps: ε = {half:.4}");
    Ok(())
}
