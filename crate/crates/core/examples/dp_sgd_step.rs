//! A handful of DP-SGD steps on attention weights with per-step diagnostics.

use dpldm::accountant::{calibrate_sigma, Conversion};
use dpldm::autoencoder::{Autoencoder, AutoencoderConfig};
use dpldm::data::{synthetic_shapes, Domain};
use dpldm::diffusion::schedule::NoiseSchedule;
use dpldm::diffusion::unet::UNetConfig;
use dpldm::diffusion::{DiffusionModel, TrainableSpec};
use dpldm::dp::{DpConfig, DpTrainer};
use dpldm::rng::{stream, Purpose};

fn main() -> dpldm::Result<()> {
    let ds = synthetic_shapes(256, 16, Domain::Private, 0);
    let ae = Autoencoder::new(AutoencoderConfig::default(), &mut stream(0, Purpose::Init, &[0]))?;
    let latents = ae.encode(&ds.images())?;
    let labels = ds.class_labels()?;
    let mut model = DiffusionModel::new(UNetConfig::default(), NoiseSchedule::linear_scaled(200)?, &mut stream(0, Purpose::Init, &[1]))?;
    let trainable = model.select_trainable(&TrainableSpec::all_attention(true))?;

    let (batch_size, steps) = (32, 8);
    let q = batch_size as f64 / ds.len() as f64;
    let sigma = calibrate_sigma(q, steps, 1e-5, 4.0, Conversion::Improved)?;
    let cfg = DpConfig { batch_size, clip: 1.0, sigma, lr: 0.05, steps, seed: 0, microbatch: 8, delta: 1e-5, research_mode: false };
    println!("{trainable} trainable scalars, σ = {sigma:.3}");
    let mut trainer = DpTrainer::new(cfg, &latents, Some(&labels))?;
    trainer.run(&mut model, |r| {
        println!(
            "step {:>2}  B = {:>2}  norms {:.3}/{:.3}/{:.3}  clipped {:>3.0}%  noise {:.2}  loss {:.4}",
            r.step, r.batch, r.norm_min, r.norm_median, r.norm_max, 100.0 * r.clipped_fraction, r.noise_norm, r.loss
        );
        Ok(())
    })?;
    println!("spent ε = {:.3}", trainer.ledger.epsilon()?);
    Ok(())
}
