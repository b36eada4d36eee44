//! Smallest noise multiplier meeting a target ε for a fine-tuning schedule.

use dpldm::accountant::{calibrate_sigma, epsilon_at_delta, Conversion};
use dpldm::dp::DpConfig;

fn main() -> dpldm::Result<()> {
    let (n, epochs, delta) = (2048usize, 10u64, 1e-5);
    println!("{:>6} {:>6} {:>8} {:>10} {:>10}", "batch", "steps", "target", "sigma", "achieved");
    for batch in [64usize, 512] {
        let steps = DpConfig::steps_for_epochs(epochs, n, batch);
        let q = batch as f64 / n as f64;
        for target in [1.0, 5.0, 10.0] {
            let sigma = calibrate_sigma(q, steps, delta, target, Conversion::Improved)?;
            let eps = epsilon_at_delta(q, sigma, steps, delta, Conversion::Improved)?;
            println!("{batch:>6} {steps:>6} {target:>8} {sigma:>10.4} {eps:>10.5}");
        }
    }
    Ok(())
}
