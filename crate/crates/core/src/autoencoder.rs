//! Convolutional autoencoder between pixels and diffusion latents.

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::optim::Momentum;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Weight of the latent L2 penalty.
pub const LATENT_PENALTY: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Downsampling factor `f = 2^m`.
    pub factor: usize,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    /// One width multiplier per downsampling level (`m` entries).
    pub multipliers: Vec<usize>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { factor: 2, image_channels: 1, latent_channels: 2, base_width: 8, multipliers: vec![2] }
    }
}

impl AutoencoderConfig {
    /// `m` with `f = 2^m`.
    pub fn levels(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 || !self.factor.is_power_of_two() {
            bail!(Config, "downsampling factor {} is not 2^m with m >= 1", self.factor);
        }
        if self.multipliers.len() != self.levels() {
            bail!(Config, "{} width multipliers for {} levels", self.multipliers.len(), self.levels());
        }
        if self.image_channels == 0 || self.latent_channels == 0 || self.base_width == 0 || self.multipliers.contains(&0) {
            bail!(Config, "channel counts must be positive");
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.base_width).chain(self.multipliers.iter().map(|m| m * self.base_width)).collect()
    }

    pub fn latent_size(&self, image_size: usize) -> Result<usize> {
        if image_size % self.factor != 0 {
            bail!(Config, "image extent {image_size} not divisible by f = {}", self.factor);
        }
        Ok(image_size / self.factor)
    }
}

/// Encoder and decoder weights plus the latent scale used by diffusion.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub store: ParamStore,
    /// Multiplier applied to encoder outputs so latents have roughly unit
    /// variance; decoding divides it back out.
    pub latent_scale: f64,
}

fn add_conv<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut R) -> Result<()> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    store.insert(&format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng), ParamGroup::Autoencoder, true)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]), ParamGroup::Autoencoder, true)
}

fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = tape.param_from(store, &format!("{name}.w"))?;
    let b = tape.param_from(store, &format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, padding)?;
    tape.add_channel(y, b)
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.widths();
        let m = config.levels();
        let mut store = ParamStore::new();
        add_conv(&mut store, "enc.in", w[0], config.image_channels, 3, rng)?;
        for l in 0..m {
            add_conv(&mut store, &format!("enc.down{l}"), w[l + 1], w[l], 3, rng)?;
            add_conv(&mut store, &format!("enc.res{l}"), w[l + 1], w[l + 1], 3, rng)?;
        }
        add_conv(&mut store, "enc.out", config.latent_channels, w[m], 1, rng)?;
        add_conv(&mut store, "dec.in", w[m], config.latent_channels, 3, rng)?;
        for l in (0..m).rev() {
            add_conv(&mut store, &format!("dec.up{l}"), w[l], w[l + 1], 3, rng)?;
            add_conv(&mut store, &format!("dec.res{l}"), w[l], w[l], 3, rng)?;
        }
        add_conv(&mut store, "dec.out", config.image_channels, w[0], 3, rng)?;
        Ok(Self { config, store, latent_scale: 1.0 })
    }

    fn check_images(&self, x: &[usize]) -> Result<()> {
        if x.len() != 4 || x[1] != self.config.image_channels {
            bail!(Dimension, "expected [n, {}, H, W], got {:?}", self.config.image_channels, x);
        }
        self.config.latent_size(x[2])?;
        self.config.latent_size(x[3])?;
        Ok(())
    }

    /// Unscaled encoder on the tape.
    fn encode_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_images(tape.shape(x))?;
        let mut h = conv(tape, &self.store, "enc.in", x, 1, 1)?;
        for l in 0..self.config.levels() {
            h = tape.silu(h);
            h = conv(tape, &self.store, &format!("enc.down{l}"), h, 2, 1)?;
            let r = tape.silu(h);
            let r = conv(tape, &self.store, &format!("enc.res{l}"), r, 1, 1)?;
            h = tape.add(h, r)?;
        }
        let h = tape.silu(h);
        conv(tape, &self.store, "enc.out", h, 1, 0)
    }

    /// Decoder on the tape, taking unscaled latents.
    fn decode_var(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            bail!(Dimension, "expected latents [n, {}, h, w], got {:?}", self.config.latent_channels, s);
        }
        let mut h = conv(tape, &self.store, "dec.in", z, 1, 1)?;
        for l in (0..self.config.levels()).rev() {
            h = tape.silu(h);
            h = tape.upsample2x(h)?;
            h = conv(tape, &self.store, &format!("dec.up{l}"), h, 1, 1)?;
            let r = tape.silu(h);
            let r = conv(tape, &self.store, &format!("dec.res{l}"), r, 1, 1)?;
            h = tape.add(h, r)?;
        }
        let h = tape.silu(h);
        let h = conv(tape, &self.store, "dec.out", h, 1, 1)?;
        Ok(tape.tanh(h))
    }

    /// Scaled latents `[n, c, H/f, W/f]` of `images[n, ch, H, W]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images.shape())?;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for idx in (0..n).collect::<Vec<_>>().chunks(128) {
            let mut tape = Tape::new();
            let x = tape.leaf(images.select_rows(idx));
            let z = self.encode_var(&mut tape, x)?;
            parts.push(tape.value(z).map(|v| v * self.latent_scale));
        }
        concat_rows(&parts)
    }

    /// Images in `[-1, 1]` from scaled latents.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        if latents.ndim() != 4 {
            bail!(Dimension, "expected 4-d latents, got {:?}", latents.shape());
        }
        let n = latents.shape()[0];
        let mut parts = Vec::new();
        for idx in (0..n).collect::<Vec<_>>().chunks(128) {
            let mut tape = Tape::new();
            let z = tape.leaf(latents.select_rows(idx).map(|v| v / self.latent_scale));
            let x = self.decode_var(&mut tape, z)?;
            parts.push(tape.value(x).clone());
        }
        concat_rows(&parts)
    }

    /// Mean squared reconstruction error over every pixel.
    pub fn reconstruction_error(&self, images: &Tensor) -> Result<f64> {
        let rec = self.decode(&self.encode(images)?)?;
        let diff: f64 = rec.data().iter().zip(images.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(diff / images.numel() as f64)
    }
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        bail!(Data, "no rows to concatenate");
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, lr: 0.05, momentum: 0.9, seed: 0 }
    }
}

/// Train on public images with SGD + momentum, then set the latent scale
/// to the inverse standard deviation of the training latents. Returns the
/// model and the mean loss of every epoch.
pub fn train_autoencoder(
    images: &Tensor,
    config: AutoencoderConfig,
    train: &AeTrainConfig,
) -> Result<(Autoencoder, Vec<f64>)> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        bail!(Data, "autoencoder training set is empty");
    }
    let mut ae = Autoencoder::new(config, &mut stream(train.seed, Purpose::Init, &[0xAE]))?;
    ae.check_images(images.shape())?;
    let mut opt = Momentum::new(train.lr, train.momentum);
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut stream(train.seed, Purpose::Batches, &[epoch as u64, 0xAE]));
        let (mut total, mut batches) = (0.0, 0);
        for idx in order.chunks(train.batch_size.max(1)) {
            let mut tape = Tape::new();
            let x = tape.leaf(images.select_rows(idx));
            let z = ae.encode_var(&mut tape, x)?;
            let rec = ae.decode_var(&mut tape, z)?;
            let mse = tape.mse(rec, x)?;
            let zz = tape.mul(z, z)?;
            let pen = tape.mean(zz);
            let pen = tape.scale(pen, LATENT_PENALTY);
            let loss = tape.add(mse, pen)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward_for(loss, &ae.store)?;
            opt.step(&mut ae.store, &grads)?;
        }
        log.push(total / batches as f64);
    }
    let z = ae.encode(images)?;
    let mean = z.data().iter().sum::<f64>() / z.numel() as f64;
    let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.numel() as f64;
    ae.latent_scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    ae.store.freeze_all();
    Ok((ae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn latent_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ae = Autoencoder::new(AutoencoderConfig::default(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 1, 8, 8], 0.5, &mut rng);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[3, 2, 4, 4]);
        let back = ae.decode(&z).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert!(back.data().iter().all(|v| v.abs() <= 1.0));

        let cfg = AutoencoderConfig { factor: 4, multipliers: vec![1, 2], ..AutoencoderConfig::default() };
        let ae = Autoencoder::new(cfg, &mut rng).unwrap();
        let z = ae.encode(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        assert_eq!(z.shape(), &[1, 2, 8, 8]);
        assert!(matches!(ae.encode(&Tensor::zeros(&[1, 1, 30, 30])), Err(crate::Error::Config(_))));
    }

    #[test]
    fn config_rules() {
        for (factor, mults) in [(3, vec![1]), (1, vec![]), (4, vec![1])] {
            let c = AutoencoderConfig { factor, multipliers: mults, ..AutoencoderConfig::default() };
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn empty_set_is_a_data_error() {
        let x = Tensor::zeros(&[0, 1, 8, 8]);
        assert!(matches!(
            train_autoencoder(&x, AutoencoderConfig::default(), &AeTrainConfig::default()),
            Err(crate::Error::Data(_))
        ));
    }
}
