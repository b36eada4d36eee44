//! Forward noising at a few timesteps, then ancestral sampling from an
//! untrained denoiser.

use dpldm::diffusion::schedule::NoiseSchedule;
use dpldm::diffusion::unet::UNetConfig;
use dpldm::diffusion::{ddpm_sample, DiffusionModel};
use dpldm::rng::{stream, Purpose};
use dpldm::tensor::Tensor;

fn main() -> dpldm::Result<()> {
    let schedule = NoiseSchedule::linear_scaled(200)?;
    let z0 = Tensor::new(&[1, 2, 1, 1], vec![1.5, -0.5])?;
    let mut rng = stream(0, Purpose::Sampling, &[0]);
    for t in [1, 50, 100, 200] {
        let noise = Tensor::randn(&[1, 2, 1, 1], 1.0, &mut rng);
        let zt = schedule.q_sample(&z0, t, &noise)?;
        println!("t = {t:>3}  ᾱ = {:.4}  z_t = {:?}", schedule.alpha_bar(t), zt.data());
    }

    let model = DiffusionModel::new(UNetConfig::default(), schedule, &mut stream(0, Purpose::Init, &[]))?;
    let labels = [0, 1, 0, 1];
    let z = ddpm_sample(&model, &model.schedule, model.latent_shape(), labels.len(), Some(&labels), &mut rng)?;
    let rms = (z.data().iter().map(|v| v * v).sum::<f64>() / z.numel() as f64).sqrt();
    // random weights predict no useful noise, so the reverse chain drifts far
    // from unit scale; full_pipeline samples from a trained model
    println!("sampled latents {:?}, rms {rms:.3}", z.shape());
    Ok(())
}
