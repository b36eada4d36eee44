//! Run configuration: a versioned TOML document covering every stage.

use crate::accountant::Conversion;
use crate::autoencoder::{AeTrainConfig, AutoencoderConfig};
use crate::diffusion::unet::UNetConfig;
use crate::diffusion::TrainableSpec;
use crate::error::{bail, Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub public_n: usize,
    pub private_n: usize,
    /// Held-out private images used as the evaluation reference.
    pub test_n: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { public_n: 4096, private_n: 2048, test_n: 512, size: 16, seed: 0 }
    }
}

/// Where the public, private and held-out private images come from. Paths
/// may point at archives or image directories. When `synthetic` is set the
/// ingest stage generates all three instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub public: Option<PathBuf>,
    pub private: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    pub factor: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub multipliers: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        let m = AutoencoderConfig::default();
        let t = AeTrainConfig::default();
        Self {
            factor: m.factor,
            latent_channels: m.latent_channels,
            base_width: m.base_width,
            multipliers: m.multipliers,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    /// Diffusion steps `T`.
    pub steps: usize,
    pub channels: [usize; 2],
    pub time_dim: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub conditional: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self {
            steps: 200,
            channels: u.channels,
            time_dim: u.time_dim,
            heads: u.heads,
            cond_dim: u.cond_dim,
            conditional: true,
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Trainable parameter spec, e.g. `all-attn+cond`.
    pub trainable: String,
    /// Adapter rank; zero fine-tunes the attention weights directly.
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub batch_size: usize,
    /// Global clip norm. The default sits below nearly every per-sample
    /// gradient norm, so each sample contributes a unit direction scaled by C.
    pub clip: f64,
    pub epochs: u64,
    /// Per-sample learning rate; the SGD step size is `batch_size · base_lr`.
    pub base_lr: f64,
    pub delta: f64,
    /// Privacy target. With no explicit `sigma` the noise is calibrated to it.
    pub target_epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub microbatch: usize,
    pub research_mode: bool,
    pub conversion: Conversion,
    /// Write a resumable checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            trainable: "all-attn+cond".into(),
            lora_rank: 0,
            lora_scale: 1.0,
            batch_size: 512,
            clip: 0.01,
            epochs: 30,
            base_lr: 1.0 / 128.0,
            delta: 1e-5,
            target_epsilon: Some(10.0),
            sigma: None,
            microbatch: 128,
            research_mode: true,
            conversion: Conversion::Improved,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
    /// Condition on class-balanced labels.
    pub labels: bool,
    /// Checkpoint to sample from: `finetuned` or `pretrained`.
    pub source: String,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { count: 256, labels: true, source: "finetuned".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub feature_dim: usize,
    pub dpfid_epsilon: f64,
    pub dpfid_delta: f64,
    pub classifier_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { feature_dim: 32, dpfid_epsilon: 10.0, dpfid_delta: 1e-5, classifier_epochs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// Defaults for the synthetic shapes task writing into `out_dir`.
    pub fn synthetic(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed,
            out_dir: out_dir.into(),
            data: DataConfig { synthetic: Some(SyntheticData::default()), ..DataConfig::default() },
            autoencoder: AutoencoderSection::default(),
            diffusion: DiffusionSection::default(),
            finetune: FinetuneSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text; this is what artifacts echo and hash.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        crate::checkpoint::config_hash(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(Config, "config version {} is not {CONFIG_VERSION}", self.version);
        }
        self.ae_config().validate()?;
        self.trainable_spec()?;
        let f = &self.finetune;
        if let Some(e) = f.target_epsilon {
            if !(e > 0.0) {
                bail!(Config, "target epsilon must be positive");
            }
        }
        if f.target_epsilon.is_none() && f.sigma.is_none() {
            bail!(Config, "finetune needs target_epsilon or sigma");
        }
        if self.sample.source != "finetuned" && self.sample.source != "pretrained" {
            bail!(Config, "sample source must be finetuned or pretrained, got {}", self.sample.source);
        }
        if self.diffusion.steps == 0 {
            bail!(Config, "diffusion needs at least one step");
        }
        Ok(())
    }

    pub fn ae_config(&self) -> AutoencoderConfig {
        let a = &self.autoencoder;
        AutoencoderConfig {
            factor: a.factor,
            image_channels: 1,
            latent_channels: a.latent_channels,
            base_width: a.base_width,
            multipliers: a.multipliers.clone(),
        }
    }

    pub fn ae_train(&self) -> AeTrainConfig {
        let a = &self.autoencoder;
        AeTrainConfig { epochs: a.epochs, batch_size: a.batch_size, lr: a.lr, momentum: a.momentum, seed: self.seed }
    }

    pub fn unet_config(&self, latent_channels: usize, latent_size: usize, num_classes: usize) -> UNetConfig {
        let d = &self.diffusion;
        UNetConfig {
            latent_channels,
            latent_size,
            channels: d.channels,
            time_dim: d.time_dim,
            heads: d.heads,
            num_classes: if d.conditional { num_classes } else { 0 },
            cond_dim: if d.conditional { d.cond_dim } else { 0 },
            null_class: false,
        }
    }

    /// SGD step size of the fine-tune stage.
    pub fn finetune_lr(&self) -> f64 {
        self.finetune.batch_size as f64 * self.finetune.base_lr
    }

    pub fn trainable_spec(&self) -> Result<TrainableSpec> {
        self.finetune.trainable.parse()
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let cfg = RunConfig::synthetic("out", 3);
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = RunConfig { seed: 4, ..cfg };
        assert_ne!(other.hash(), back.hash());
    }

    #[test]
    fn minimal_and_bad_configs() {
        let cfg = RunConfig::parse("version = 1\nseed = 0\nout_dir = \"x\"\n").unwrap();
        assert_eq!(cfg.finetune.batch_size, 512);
        for bad in [
            "version = 2\nseed = 0\nout_dir = \"x\"\n",
            "version = 1\nseed = 0\nout_dir = \"x\"\nbogus = 1\n",
            "version = 1\nseed = 0\nout_dir = \"x\"\n[autoencoder]\nfactor = 3\n",
            "version = 1\nseed = 0\nout_dir = \"x\"\n[finetune]\ntrainable = \"wings\"\n",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
