//! Every stage end to end on a small synthetic run: ingest, autoencoder,
//! public pre-training, private fine-tuning, sampling and FID.
//!
//! cargo run --release --example full_pipeline -- [out_dir]

use dpldm::config::{RunConfig, SyntheticData};
use dpldm::pipeline::run_all;

fn main() -> dpldm::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("dpldm-example-run"), Into::into);
    let mut cfg = RunConfig::synthetic(&dir, 0);
    // a few minutes on one core; drop these lines for the desk-scale run
    cfg.data.synthetic = Some(SyntheticData { public_n: 1024, private_n: 512, test_n: 128, size: 16, seed: 0 });
    cfg.diffusion.epochs = 4;
    cfg.finetune.batch_size = 128;
    cfg.sample.count = 64;
    // the same run can be driven stage by stage with `dpldm <stage> -c run.toml`
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("run.toml"), cfg.to_toml())?;
    for out in run_all(&cfg)? {
        println!("{:<12} {}", out.stage.name(), out.summary);
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}
