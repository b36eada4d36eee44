//! FID against a private reference set, released under (ε, δ)-DP for a
//! range of budgets.

use dpldm::data::{synthetic_shapes, Domain};
use dpldm::fid::{dp_fid, fid, DpFidOptions, FidBudget, Neighboring};
use dpldm::pipeline::feature_stats;
use dpldm::rng::{stream, Purpose};

fn main() -> dpldm::Result<()> {
    let private = feature_stats(&synthetic_shapes(2048, 16, Domain::Private, 0), 32)?;
    let public = feature_stats(&synthetic_shapes(1024, 16, Domain::Public, 0), 32)?;
    println!("non-private FID {:.4}", fid(&private, &public)?);
    for eps in [0.5, 1.0, 5.0, 10.0] {
        let opts = DpFidOptions {
            budget: FidBudget::split(eps, 1e-5),
            neighboring: Neighboring::AddRemove,
            mean_only: false,
            zero_noise: false,
        };
        let draws: Vec<f64> = (0..5)
            .map(|s| dp_fid(&private, &public, &opts, &mut stream(s, Purpose::Privatize, &[])).map(|r| r.value))
            .collect::<dpldm::Result<_>>()?;
        let shown: Vec<String> = draws.iter().map(|v| format!("{v:.4}")).collect();
        println!("ε = {eps:>4}: {}", shown.join(" "));
    }
    Ok(())
}
