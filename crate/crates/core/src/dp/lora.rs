//! Low-rank adapters `W + s·B·A` on frozen projection weights.

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Adapters attached to a set of weight matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<String>,
}

impl LoraSpec {
    /// Number of adapter scalars: `Σ r·(d_in + d_out)` over targets.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.targets
            .iter()
            .filter_map(|t| store.get(t))
            .map(|p| self.rank * (p.value.shape()[0] + p.value.shape()[1]))
            .sum()
    }
}

pub fn down_name(target: &str) -> String {
    format!("{target}.lora_a")
}

pub fn up_name(target: &str) -> String {
    format!("{target}.lora_b")
}

/// Reparameterise each `targets` weight `W[d_out×d_in]` with factors
/// `A[r×d_in]` (random) and `B[d_out×r]` (zero). Every pre-existing
/// parameter is frozen; only the new factors are trainable.
pub fn attach<R: Rng + ?Sized>(
    store: &mut ParamStore,
    targets: &[String],
    rank: usize,
    scale: f64,
    rng: &mut R,
) -> Result<LoraSpec> {
    if rank == 0 {
        bail!(Config, "LoRA rank must be at least 1");
    }
    if targets.is_empty() {
        bail!(Config, "LoRA needs at least one target weight");
    }
    let mut shapes = Vec::with_capacity(targets.len());
    for t in targets {
        let Some(p) = store.get(t) else {
            bail!(Config, "LoRA target {t} does not exist");
        };
        let s = p.value.shape();
        if s.len() != 2 {
            bail!(Config, "LoRA target {t} is not a matrix: {:?}", s);
        }
        if rank > s[0].min(s[1]) {
            bail!(Config, "LoRA rank {rank} exceeds min({}, {}) for {t}", s[0], s[1]);
        }
        if store.contains(&down_name(t)) {
            bail!(Config, "LoRA already attached to {t}");
        }
        shapes.push((s[0], s[1]));
    }
    store.freeze_all();
    for (t, (d_out, d_in)) in targets.iter().zip(shapes) {
        let a = Tensor::randn(&[rank, d_in], (1.0 / d_in as f64).sqrt(), rng);
        store.insert(&down_name(t), a, ParamGroup::Adapter, true)?;
        store.insert(&up_name(t), Tensor::zeros(&[d_out, rank]), ParamGroup::Adapter, true)?;
    }
    Ok(LoraSpec { rank, scale, targets: targets.to_vec() })
}

/// Place weight `name` on the tape, folding in its adapter when present.
pub fn effective_weight(tape: &mut Tape, store: &ParamStore, name: &str, lora: Option<&LoraSpec>) -> Result<Var> {
    let w = tape.param_from(store, name)?;
    let Some(spec) = lora else { return Ok(w) };
    let (a_name, b_name) = (down_name(name), up_name(name));
    if !store.contains(&a_name) {
        return Ok(w);
    }
    let a = tape.param_from(store, &a_name)?;
    let b = tape.param_from(store, &b_name)?;
    let ba = tape.matmul(b, a)?;
    let ba = tape.scale(ba, spec.scale);
    tape.add(w, ba)
}

/// Fold adapters into their base weights and drop them from the store.
pub fn merge(store: &mut ParamStore, spec: &LoraSpec) -> Result<()> {
    for t in &spec.targets {
        let (Some(a), Some(b)) = (store.remove(&down_name(t)), store.remove(&up_name(t))) else {
            bail!(State, "adapter for {t} missing");
        };
        let delta = b.value.matmul(&a.value)?;
        let Some(p) = store.get_mut(t) else {
            bail!(State, "LoRA base weight {t} missing");
        };
        for (w, d) in p.value.data_mut().iter_mut().zip(delta.data()) {
            *w += spec.scale * d;
        }
    }
    Ok(())
}
