//! A two-level UNet with attention after every residual block.
//!
//! Layout (for `channels = [c0, c1]`):
//!
//! ```text
//! conv_in ─ res+attn1 ─ down ─ res+attn2 ─ mid(res, attn3, res)
//!   │           │         │        │            │
//!   │           │         │        └──── cat ─ res+attn4
//!   │           │         └───────────── cat ─ res+attn5 ─ up
//!   │           └─────────────────────── cat ─ res+attn6
//!   └─────────────────────────────────── cat ─ res+attn7 ─ conv_out
//! ```
//!
//! Seven attention modules: two in the input blocks, one in the middle block
//! and four in the output blocks.

use super::attention::{AttentionKind, AttentionModule, BlockLocation};
use crate::autodiff::{Tape, Var};
use crate::dp::lora::LoraSpec;
use crate::error::{bail, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Spatial extent of the (square) latent; must be even.
    pub latent_size: usize,
    /// Channel widths of the two resolution levels.
    pub channels: [usize; 2],
    /// Width of the sinusoidal time features.
    pub time_dim: usize,
    pub heads: usize,
    /// Number of classes; zero builds an unconditional model.
    pub num_classes: usize,
    pub cond_dim: usize,
    /// Reserve an extra embedding row used when no label is given.
    pub null_class: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 2,
            latent_size: 8,
            channels: [8, 16],
            time_dim: 16,
            heads: 1,
            num_classes: 2,
            cond_dim: 8,
            null_class: false,
        }
    }
}

impl UNetConfig {
    pub fn conditional(&self) -> bool {
        self.num_classes > 0
    }

    pub fn embedding_rows(&self) -> usize {
        self.num_classes + usize::from(self.null_class)
    }

    fn temb_dim(&self) -> usize {
        4 * self.channels[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0 || self.latent_size % 2 != 0 {
            bail!(Config, "latent size {} must be positive and even", self.latent_size);
        }
        if self.latent_channels == 0 || self.channels.contains(&0) {
            bail!(Config, "channel counts must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            bail!(Config, "time_dim must be positive and even");
        }
        if self.channels.iter().any(|c| c % self.heads.max(1) != 0) || self.heads == 0 {
            bail!(Config, "channels {:?} not divisible by {} heads", self.channels, self.heads);
        }
        if self.conditional() && self.cond_dim == 0 {
            bail!(Config, "conditional model needs cond_dim > 0");
        }
        Ok(())
    }
}

/// Residual block: two 3x3 convolutions with a time-embedding shift.
struct ResBlock {
    prefix: &'static str,
    c_in: usize,
    c_out: usize,
}

impl ResBlock {
    fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, temb: usize, rng: &mut R) -> Result<()> {
        let g = ParamGroup::Backbone;
        let p = self.prefix;
        let std1 = (2.0 / (9 * self.c_in) as f64).sqrt();
        let std2 = 0.3 * (2.0 / (9 * self.c_out) as f64).sqrt();
        store.insert(&format!("{p}.conv1.w"), Tensor::randn(&[self.c_out, self.c_in, 3, 3], std1, rng), g, true)?;
        store.insert(&format!("{p}.conv1.b"), Tensor::zeros(&[self.c_out]), g, true)?;
        store.insert(&format!("{p}.temb.w"), Tensor::randn(&[self.c_out, temb], (1.0 / temb as f64).sqrt(), rng), g, true)?;
        store.insert(&format!("{p}.temb.b"), Tensor::zeros(&[self.c_out]), g, true)?;
        store.insert(&format!("{p}.conv2.w"), Tensor::randn(&[self.c_out, self.c_out, 3, 3], std2, rng), g, true)?;
        store.insert(&format!("{p}.conv2.b"), Tensor::zeros(&[self.c_out]), g, true)?;
        if self.c_in != self.c_out {
            let std = (1.0 / self.c_in as f64).sqrt();
            store.insert(&format!("{p}.skip.w"), Tensor::randn(&[self.c_out, self.c_in, 1, 1], std, rng), g, true)?;
            store.insert(&format!("{p}.skip.b"), Tensor::zeros(&[self.c_out]), g, true)?;
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, temb: Var) -> Result<Var> {
        let p = self.prefix;
        let h = tape.silu(x);
        let h = conv(tape, store, &format!("{p}.conv1"), h, 1, 1)?;
        let w = tape.param_from(store, &format!("{p}.temb.w"))?;
        let b = tape.param_from(store, &format!("{p}.temb.b"))?;
        let shift = tape.linear(temb, w, Some(b))?;
        let h = tape.add_channel(h, shift)?;
        let h = tape.silu(h);
        let h = conv(tape, store, &format!("{p}.conv2"), h, 1, 1)?;
        let skip = if self.c_in != self.c_out {
            conv(tape, store, &format!("{p}.skip"), x, 1, 0)?
        } else {
            x
        };
        tape.add(skip, h)
    }
}

fn conv(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = tape.param_from(store, &format!("{prefix}.w"))?;
    let b = tape.param_from(store, &format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, stride, padding)?;
    tape.add_channel(y, b)
}

/// Sinusoidal features of integer time steps, `[len(t), dim]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut sin = Vec::with_capacity(half);
        let mut cos = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            sin.push(arg.sin());
            cos.push(arg.cos());
        }
        out.extend(sin);
        out.extend(cos);
    }
    Tensor::new(&[t.len(), dim], out).expect("consistent shape")
}

/// Noise predictor `τ_θ(z_t, t, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetLite {
    pub config: UNetConfig,
    pub attention: Vec<AttentionModule>,
}

const RES_BLOCKS: [&str; 8] = ["in0", "in1", "mid1", "mid2", "out1a", "out1b", "out0a", "out0b"];
/// Attention module following each residual block (`mid2` has none).
const ATTN_AFTER: [usize; 8] = [1, 2, 3, 0, 4, 5, 6, 7];

impl UNetLite {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let [c0, c1] = config.channels;
        let kind = if config.conditional() { AttentionKind::Cross } else { AttentionKind::SelfAttention };
        let layout = [
            (BlockLocation::Input, c0),
            (BlockLocation::Input, c1),
            (BlockLocation::Middle, c1),
            (BlockLocation::Output, c1),
            (BlockLocation::Output, c1),
            (BlockLocation::Output, c0),
            (BlockLocation::Output, c0),
        ];
        let attention = layout
            .iter()
            .enumerate()
            .map(|(i, &(location, channels))| AttentionModule {
                index: i + 1,
                location,
                kind,
                channels,
                cond_dim: config.cond_dim,
                heads: config.heads,
            })
            .collect();
        Ok(Self { config, attention })
    }

    fn res_blocks(&self) -> Vec<ResBlock> {
        let [c0, c1] = self.config.channels;
        let dims = [(c0, c0), (c1, c1), (c1, c1), (c1, c1), (2 * c1, c1), (2 * c1, c1), (c1 + c0, c0), (2 * c0, c0)];
        RES_BLOCKS
            .iter()
            .zip(dims)
            .map(|(&prefix, (c_in, c_out))| ResBlock { prefix, c_in, c_out })
            .collect()
    }

    /// Register freshly initialised parameters.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let cfg = &self.config;
        let [c0, c1] = cfg.channels;
        let temb = cfg.temb_dim();
        let g = ParamGroup::Backbone;
        let mut store = ParamStore::new();
        store.insert("time.lin1.w", Tensor::randn(&[temb, cfg.time_dim], (1.0 / cfg.time_dim as f64).sqrt(), rng), g, true)?;
        store.insert("time.lin1.b", Tensor::zeros(&[temb]), g, true)?;
        store.insert("time.lin2.w", Tensor::randn(&[temb, temb], (1.0 / temb as f64).sqrt(), rng), g, true)?;
        store.insert("time.lin2.b", Tensor::zeros(&[temb]), g, true)?;
        let lc = cfg.latent_channels;
        store.insert("conv_in.w", Tensor::randn(&[c0, lc, 3, 3], (1.0 / (9 * lc) as f64).sqrt(), rng), g, true)?;
        store.insert("conv_in.b", Tensor::zeros(&[c0]), g, true)?;
        store.insert("down.w", Tensor::randn(&[c1, c0, 3, 3], (2.0 / (9 * c0) as f64).sqrt(), rng), g, true)?;
        store.insert("down.b", Tensor::zeros(&[c1]), g, true)?;
        store.insert("up.w", Tensor::randn(&[c1, c1, 3, 3], (2.0 / (9 * c1) as f64).sqrt(), rng), g, true)?;
        store.insert("up.b", Tensor::zeros(&[c1]), g, true)?;
        store.insert("conv_out.w", Tensor::randn(&[lc, c0, 3, 3], 0.3 * (1.0 / (9 * c0) as f64).sqrt(), rng), g, true)?;
        store.insert("conv_out.b", Tensor::zeros(&[lc]), g, true)?;
        for block in &self.res_blocks() {
            block.register(&mut store, temb, rng)?;
        }
        for m in &self.attention {
            m.register(&mut store, rng)?;
        }
        if cfg.conditional() {
            store.insert(
                "cond.embedding",
                Tensor::randn(&[cfg.embedding_rows(), cfg.cond_dim], 1.0, rng),
                ParamGroup::Conditioning,
                true,
            )?;
        }
        Ok(store)
    }

    /// Validate labels against the conditioning setup and map them to
    /// embedding rows.
    pub fn label_rows(&self, batch: usize, y: Option<&[usize]>) -> Result<Option<Vec<usize>>> {
        let cfg = &self.config;
        match (cfg.conditional(), y) {
            (false, None) => Ok(None),
            (false, Some(_)) => bail!(Contract, "labels given to an unconditional model"),
            (true, None) if cfg.null_class => Ok(Some(vec![cfg.num_classes; batch])),
            (true, None) => bail!(Contract, "conditional model needs labels"),
            (true, Some(labels)) => {
                if labels.len() != batch {
                    bail!(Contract, "{} labels for a batch of {}", labels.len(), batch);
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
                    bail!(Contract, "label {bad} outside 0..{}", cfg.num_classes);
                }
                Ok(Some(labels.to_vec()))
            }
        }
    }

    /// Predict the injected noise for `z_t[b, c, h, w]` at steps `t`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lora: Option<&LoraSpec>,
        z_t: Var,
        t: &[usize],
        y: Option<&[usize]>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(z_t).to_vec();
        let want = [t.len(), cfg.latent_channels, cfg.latent_size, cfg.latent_size];
        if s != want {
            bail!(Dimension, "UNet input {:?}, expected {:?}", s, want);
        }
        let batch = t.len();
        let rows = self.label_rows(batch, y)?;

        let feats = tape.leaf(timestep_features(t, cfg.time_dim));
        let w1 = tape.param_from(store, "time.lin1.w")?;
        let b1 = tape.param_from(store, "time.lin1.b")?;
        let temb = tape.linear(feats, w1, Some(b1))?;
        let temb = tape.silu(temb);
        let w2 = tape.param_from(store, "time.lin2.w")?;
        let b2 = tape.param_from(store, "time.lin2.b")?;
        let temb = tape.linear(temb, w2, Some(b2))?;
        let temb = tape.silu(temb);

        let cond = match rows {
            Some(rows) => {
                let table = tape.param_from(store, "cond.embedding")?;
                let tokens = tape.gather(table, &rows)?;
                Some(tape.reshape(tokens, &[batch, 1, cfg.cond_dim])?)
            }
            None => None,
        };

        let blocks = self.res_blocks();
        let block = |tape: &mut Tape, i: usize, x: Var| -> Result<Var> {
            let h = blocks[i].forward(tape, store, x, temb)?;
            self.attention[ATTN_AFTER[i] - 1].forward(tape, store, lora, h, cond)
        };

        let h0 = conv(tape, store, "conv_in", z_t, 1, 1)?;
        let h1 = block(tape, 0, h0)?;
        let h2 = conv(tape, store, "down", h1, 2, 1)?;
        let h3 = block(tape, 1, h2)?;

        let m = block(tape, 2, h3)?;
        let m = blocks[3].forward(tape, store, m, temb)?;

        let x = tape.concat_channels(m, h3)?;
        let x = block(tape, 4, x)?;
        let x = tape.concat_channels(x, h2)?;
        let x = block(tape, 5, x)?;
        let x = tape.upsample2x(x)?;
        let x = conv(tape, store, "up", x, 1, 1)?;
        let x = tape.concat_channels(x, h1)?;
        let x = block(tape, 6, x)?;
        let x = tape.concat_channels(x, h0)?;
        let x = block(tape, 7, x)?;
        let x = tape.silu(x);
        conv(tape, store, "conv_out", x, 1, 1)
    }
}
