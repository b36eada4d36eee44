//! Latent diffusion: schedule, noise predictor, training loss and sampler.

pub mod attention;
pub mod schedule;
pub mod unet;

use crate::autodiff::{Tape, Var};
use crate::dp::lora::{self, LoraSpec};
use crate::error::{bail, Result};
use crate::optim::Adam;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use attention::BlockLocation;
use rand::Rng;
use rand_distr::StandardNormal;
use schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use unet::{UNetConfig, UNetLite};

/// Anything that predicts the injected noise from `(z_t, t, y)`.
pub trait Denoiser {
    fn predict(&self, tape: &mut Tape, z_t: Var, t: &[usize], y: Option<&[usize]>) -> Result<Var>;
}

/// A UNet together with its parameters, schedule and optional adapters.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub unet: UNetLite,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub lora: Option<LoraSpec>,
}

impl Denoiser for DiffusionModel {
    fn predict(&self, tape: &mut Tape, z_t: Var, t: &[usize], y: Option<&[usize]>) -> Result<Var> {
        self.unet.forward(tape, &self.store, self.lora.as_ref(), z_t, t, y)
    }
}

impl DiffusionModel {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        let unet = UNetLite::new(config)?;
        let store = unet.init_params(rng)?;
        Ok(Self { unet, schedule, store, lora: None })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let c = &self.unet.config;
        [c.latent_channels, c.latent_size, c.latent_size]
    }

    /// Put rank-`rank` adapters on every query/key/value projection. All
    /// other parameters become frozen.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, rank: usize, scale: f64, rng: &mut R) -> Result<usize> {
        if self.lora.is_some() {
            bail!(Config, "adapters already attached");
        }
        let targets: Vec<String> = self.unet.attention.iter().flat_map(|m| m.qkv_names()).collect();
        let spec = lora::attach(&mut self.store, &targets, rank, scale, rng)?;
        let count = spec.param_count(&self.store);
        self.lora = Some(spec);
        Ok(count)
    }

    /// Flag exactly the parameters named by `spec` as trainable and return
    /// their scalar count. With adapters attached, a selected attention
    /// module trains its adapters instead of its weights.
    pub fn select_trainable(&mut self, spec: &TrainableSpec) -> Result<usize> {
        let modules = spec.attention.resolve(&self.unet)?;
        if spec.conditioning && !self.store.contains("cond.embedding") {
            bail!(Config, "conditioning requested on an unconditional model");
        }
        self.store.freeze_all();
        for &i in &modules {
            let module = &self.unet.attention[i - 1];
            let names = match &self.lora {
                Some(l) => module
                    .qkv_names()
                    .into_iter()
                    .filter(|n| l.targets.contains(n))
                    .flat_map(|n| [lora::down_name(&n), lora::up_name(&n)])
                    .collect(),
                None => module.param_names(),
            };
            for n in names {
                self.store.set_trainable(&n, true)?;
            }
        }
        if spec.conditioning {
            self.store.set_trainable("cond.embedding", true)?;
        }
        if spec.backbone {
            let names: Vec<String> = self
                .store
                .iter()
                .filter(|(_, p)| p.group == ParamGroup::Backbone)
                .map(|(n, _)| n.to_string())
                .collect();
            for n in names {
                self.store.set_trainable(&n, true)?;
            }
        }
        Ok(self.store.trainable_count())
    }
}

/// Which attention modules a fine-tune touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionSelection {
    None,
    All,
    Indices(Vec<usize>),
    Location(BlockLocation),
}

impl AttentionSelection {
    /// 1-based module indices, validated against `unet`.
    pub fn resolve(&self, unet: &UNetLite) -> Result<Vec<usize>> {
        let n = unet.attention.len();
        Ok(match self {
            AttentionSelection::None => Vec::new(),
            AttentionSelection::All => (1..=n).collect(),
            AttentionSelection::Indices(ix) => {
                if let Some(bad) = ix.iter().find(|&&i| i == 0 || i > n) {
                    bail!(Config, "attention index {bad} outside 1..={n}");
                }
                ix.clone()
            }
            AttentionSelection::Location(loc) => {
                unet.attention.iter().filter(|m| m.location == *loc).map(|m| m.index).collect()
            }
        })
    }
}

/// Parsed trainable-set description such as `all-attn+cond`, `attn:4-7`,
/// `out-attn` or `none`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSpec {
    pub attention: AttentionSelection,
    pub conditioning: bool,
    pub backbone: bool,
}

impl TrainableSpec {
    pub fn none() -> Self {
        Self { attention: AttentionSelection::None, conditioning: false, backbone: false }
    }

    pub fn all_attention(conditioning: bool) -> Self {
        Self { attention: AttentionSelection::All, conditioning, backbone: false }
    }
}

fn parse_indices(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| crate::Error::Config(format!("bad index {v:?}")));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    bail!(Config, "empty index range {part}");
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl FromStr for TrainableSpec {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = TrainableSpec::none();
        let set_attn = |spec: &mut TrainableSpec, sel: AttentionSelection| -> Result<()> {
            if spec.attention != AttentionSelection::None {
                bail!(Config, "more than one attention selection in {s:?}");
            }
            spec.attention = sel;
            Ok(())
        };
        for token in s.split('+').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "none" => {}
                "all-attn" => set_attn(&mut spec, AttentionSelection::All)?,
                "input-attn" => set_attn(&mut spec, AttentionSelection::Location(BlockLocation::Input))?,
                "middle-attn" => set_attn(&mut spec, AttentionSelection::Location(BlockLocation::Middle))?,
                "out-attn" => set_attn(&mut spec, AttentionSelection::Location(BlockLocation::Output))?,
                "cond" | "conditioning" => spec.conditioning = true,
                "backbone" => spec.backbone = true,
                other => match other.strip_prefix("attn:") {
                    Some(ix) => set_attn(&mut spec, AttentionSelection::Indices(parse_indices(ix)?))?,
                    None => bail!(Config, "unknown trainable group {other:?}"),
                },
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for TrainableSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        match &self.attention {
            AttentionSelection::None => {}
            AttentionSelection::All => parts.push("all-attn".into()),
            AttentionSelection::Indices(ix) => {
                let ix: Vec<String> = ix.iter().map(usize::to_string).collect();
                parts.push(format!("attn:{}", ix.join(",")));
            }
            AttentionSelection::Location(loc) => parts.push(format!("{}-attn", loc.label())),
        }
        if self.conditioning {
            parts.push("cond".into());
        }
        if self.backbone {
            parts.push("backbone".into());
        }
        if parts.is_empty() {
            return f.write_str("none");
        }
        f.write_str(&parts.join("+"))
    }
}

fn randn_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Noise-prediction loss on a batch `z0[b, c, h, w]`: per sample draw
/// `t ~ U{1..T}` and `τ ~ N(0, I)`, then average `(τ − τ_θ(z_t, t, y))²`
/// over every element.
pub fn ldm_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &D,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    y: Option<&[usize]>,
    rng: &mut R,
) -> Result<Var> {
    if z0.ndim() != 4 {
        bail!(Dimension, "latent batch must be 4-d, got {:?}", z0.shape());
    }
    let b = z0.shape()[0];
    let t: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.steps())).collect();
    let noise = randn_tensor(z0.shape(), rng);
    let z_t = schedule.q_sample_batch(z0, &t, &noise)?;
    let z_t = tape.leaf(z_t);
    let pred = model.predict(tape, z_t, &t, y)?;
    let target = tape.leaf(noise);
    tape.mse(pred, target)
}

/// Samples denoised per forward pass inside `ddpm_sample`.
pub const SAMPLE_CHUNK: usize = 64;

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`. `latent` is the
/// per-sample shape `[c, h, w]`; labels, when given, have one entry per
/// sample.
pub fn ddpm_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    latent: [usize; 3],
    count: usize,
    y: Option<&[usize]>,
    rng: &mut R,
) -> Result<Tensor> {
    if let Some(y) = y {
        if y.len() != count {
            bail!(Contract, "{} labels for {count} samples", y.len());
        }
    }
    let per = latent.iter().product::<usize>();
    let mut out = Vec::with_capacity(count * per);
    let mut start = 0;
    while start < count {
        let n = SAMPLE_CHUNK.min(count - start);
        let shape = [n, latent[0], latent[1], latent[2]];
        let labels = y.map(|y| &y[start..start + n]);
        let mut z = randn_tensor(&shape, rng);
        for t in (1..=schedule.steps()).rev() {
            let mut tape = Tape::new();
            let zv = tape.leaf(z.clone());
            let steps = vec![t; n];
            let eps = model.predict(&mut tape, zv, &steps, labels)?;
            let eps = tape.value(eps);
            let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
            let coef = beta / (1.0 - ab).sqrt();
            let inv = 1.0 / alpha.sqrt();
            let mut next = z.zip_map(eps, |zi, ei| inv * (zi - coef * ei))?;
            if t > 1 {
                let sd = schedule.posterior_variance(t).sqrt();
                for v in next.data_mut() {
                    *v += sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            z = next;
        }
        out.extend_from_slice(z.data());
        start += n;
    }
    Tensor::new(&[count, latent[0], latent[1], latent[2]], out)
}

/// Settings for non-private pre-training on public latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Non-private training of every trainable parameter with Adam. Returns the
/// mean loss of each epoch.
pub fn pretrain(
    model: &mut DiffusionModel,
    latents: &Tensor,
    labels: Option<&[usize]>,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let n = latents.shape().first().copied().unwrap_or(0);
    if n == 0 {
        bail!(Data, "no latents to train on");
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        bail!(Config, "batch size and epochs must be positive");
    }
    if let Some(l) = labels {
        if l.len() != n {
            bail!(Data, "{} labels for {n} latents", l.len());
        }
    }
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = stream(cfg.seed, Purpose::Batches, &[epoch as u64]);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let z0 = latents.select_rows(idx);
            let y: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let mut rng = stream(cfg.seed, Purpose::SampleLoss, &[epoch as u64, bi as u64]);
            let mut tape = Tape::new();
            let loss = ldm_loss(&mut tape, &*model, &model.schedule, &z0, y.as_deref(), &mut rng)?;
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward_for(loss, &model.store)?;
            opt.step(&mut model.store, &grads)?;
        }
        log.push(total / batches as f64);
    }
    Ok(log)
}
