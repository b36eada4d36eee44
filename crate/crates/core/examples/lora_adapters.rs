//! Attach low-rank adapters to the attention projections, count what becomes
//! trainable, then fold the adapters back into the base weights.

use dpldm::diffusion::schedule::NoiseSchedule;
use dpldm::diffusion::unet::UNetConfig;
use dpldm::diffusion::DiffusionModel;
use dpldm::dp::lora;
use dpldm::rng::{stream, Purpose};

fn main() -> dpldm::Result<()> {
    let mut model = DiffusionModel::new(UNetConfig::default(), NoiseSchedule::linear_scaled(200)?, &mut stream(0, Purpose::Init, &[]))?;
    let total = model.store.total_count();
    for rank in [1, 4] {
        let mut m = model.clone();
        let added = m.attach_lora(rank, 1.0, &mut stream(0, Purpose::Init, &[rank as u64]))?;
        let targets = m.lora.as_ref().map_or(0, |s| s.targets.len());
        println!(
            "rank {rank}: {targets} targets, {added} adapter scalars, trainable {} of {} ({:.2}%)",
            m.store.trainable_count(),
            m.store.total_count(),
            100.0 * m.store.trainable_count() as f64 / m.store.total_count() as f64
        );
    }

    // zero-initialised up-projections leave the merged weights unchanged
    model.attach_lora(4, 1.0, &mut stream(0, Purpose::Init, &[4]))?;
    let spec = model.lora.take().expect("adapters attached");
    let before = model.store.clone();
    lora::merge(&mut model.store, &spec)?;
    let changed = model.store.changed_between(&before);
    println!("after merge: {} scalars (base {total}), {} tensors differ from base", model.store.total_count(), changed.len());
    Ok(())
}
