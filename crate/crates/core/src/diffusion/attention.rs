//! Attention modules inserted between the UNet residual blocks.
//!
//! A module of kind [`AttentionKind::SelfAttention`] projects queries, keys
//! and values from the pixel tokens. A [`AttentionKind::Cross`] module adds a
//! second sublayer whose keys and values come from the conditioning tokens.

use crate::autodiff::{Tape, Var};
use crate::dp::lora::{self, LoraSpec};
use crate::error::{bail, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    SelfAttention,
    Cross,
}

/// Where in the UNet a module sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockLocation {
    Input,
    Middle,
    Output,
}

impl BlockLocation {
    pub fn label(self) -> &'static str {
        match self {
            BlockLocation::Input => "input",
            BlockLocation::Middle => "middle",
            BlockLocation::Output => "out",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModule {
    /// 1-based position in forward order.
    pub index: usize,
    pub location: BlockLocation,
    pub kind: AttentionKind,
    /// Token width `d^i`; also used as the projection width `d_k`.
    pub channels: usize,
    /// Conditioning token width `d_c` (cross modules only).
    pub cond_dim: usize,
    pub heads: usize,
}

impl AttentionModule {
    pub fn prefix(&self) -> String {
        format!("attn{}", self.index)
    }

    fn sublayers(&self) -> &'static [&'static str] {
        match self.kind {
            AttentionKind::SelfAttention => &["self"],
            AttentionKind::Cross => &["self", "cross"],
        }
    }

    pub fn weight_name(&self, sublayer: &str, weight: &str) -> String {
        format!("attn{}.{sublayer}.{weight}", self.index)
    }

    /// Names of the query/key/value projections.
    pub fn qkv_names(&self) -> Vec<String> {
        self.sublayers()
            .iter()
            .flat_map(|s| ["w_q", "w_k", "w_v"].map(|w| self.weight_name(s, w)))
            .collect()
    }

    /// Every parameter owned by this module.
    pub fn param_names(&self) -> Vec<String> {
        self.sublayers()
            .iter()
            .flat_map(|s| ["w_q", "w_k", "w_v", "w_o", "b_o"].map(|w| self.weight_name(s, w)))
            .collect()
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            bail!(Config, "{} channels do not split into {} heads", self.channels, self.heads);
        }
        let d = self.channels;
        for &sub in self.sublayers() {
            let kv_in = if sub == "cross" { self.cond_dim } else { d };
            let std_q = (1.0 / d as f64).sqrt();
            let std_kv = (1.0 / kv_in as f64).sqrt();
            let g = ParamGroup::Attention;
            store.insert(&self.weight_name(sub, "w_q"), Tensor::randn(&[d, d], std_q, rng), g, true)?;
            store.insert(&self.weight_name(sub, "w_k"), Tensor::randn(&[d, kv_in], std_kv, rng), g, true)?;
            store.insert(&self.weight_name(sub, "w_v"), Tensor::randn(&[d, kv_in], std_kv, rng), g, true)?;
            store.insert(&self.weight_name(sub, "w_o"), Tensor::randn(&[d, d], 0.5 * std_q, rng), g, true)?;
            store.insert(&self.weight_name(sub, "b_o"), Tensor::zeros(&[d]), g, true)?;
        }
        Ok(())
    }

    /// `softmax(QKᵀ/√d_k)·V` for one sublayer, with `Q = ψ W_Qᵀ` and keys and
    /// values projected from `context`. Shapes: `psi[b, N, d]`,
    /// `context[b, M, ·]`, output `[b, N, d_k]`.
    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lora: Option<&LoraSpec>,
        sub: &str,
        psi: Var,
        context: Var,
    ) -> Result<Var> {
        let wq = lora::effective_weight(tape, store, &self.weight_name(sub, "w_q"), lora)?;
        let wk = lora::effective_weight(tape, store, &self.weight_name(sub, "w_k"), lora)?;
        let wv = lora::effective_weight(tape, store, &self.weight_name(sub, "w_v"), lora)?;
        let q = tape.linear(psi, wq, None)?;
        let k = tape.linear(context, wk, None)?;
        let v = tape.linear(context, wv, None)?;
        let q = tape.split_heads(q, self.heads)?;
        let k = tape.split_heads(k, self.heads)?;
        let v = tape.split_heads(v, self.heads)?;
        let head_dim = self.channels / self.heads;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let weights = tape.softmax(scores, 2)?;
        let out = tape.matmul(weights, v)?;
        tape.merge_heads(out, self.heads)
    }

    /// The core attention map of this module. Self modules attend over
    /// `psi` and must not receive `cond`; cross modules attend from `psi`
    /// to `cond`.
    pub fn attention_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lora: Option<&LoraSpec>,
        psi: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        match (self.kind, cond) {
            (AttentionKind::SelfAttention, None) => {
                self.check_tokens(tape, psi, None)?;
                self.attend(tape, store, lora, "self", psi, psi)
            }
            (AttentionKind::Cross, Some(c)) => {
                self.check_tokens(tape, psi, Some(c))?;
                self.attend(tape, store, lora, "cross", psi, c)
            }
            (AttentionKind::SelfAttention, Some(_)) => {
                bail!(Contract, "conditioning passed to self-attention module {}", self.index)
            }
            (AttentionKind::Cross, None) => {
                bail!(Contract, "cross-attention module {} needs conditioning tokens", self.index)
            }
        }
    }

    fn check_tokens(&self, tape: &Tape, psi: Var, cond: Option<Var>) -> Result<()> {
        let s = tape.shape(psi);
        if s.len() != 3 || s[2] != self.channels {
            bail!(Dimension, "attention {} expects [b, N, {}], got {:?}", self.index, self.channels, s);
        }
        if let Some(c) = cond {
            let sc = tape.shape(c);
            if sc.len() != 3 || sc[0] != s[0] || sc[2] != self.cond_dim {
                bail!(Dimension, "attention {} expects cond [b, M, {}], got {:?}", self.index, self.cond_dim, sc);
            }
        }
        Ok(())
    }

    fn project_residual(&self, tape: &mut Tape, store: &ParamStore, sub: &str, tokens: Var, attended: Var) -> Result<Var> {
        let wo = tape.param_from(store, &self.weight_name(sub, "w_o"))?;
        let bo = tape.param_from(store, &self.weight_name(sub, "b_o"))?;
        let proj = tape.linear(attended, wo, Some(bo))?;
        tape.add(tokens, proj)
    }

    /// Full block on a feature map `x[b, c, h, w]`: attention sublayers with
    /// output projections and residual connections.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lora: Option<&LoraSpec>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let tokens = tape.to_tokens(x)?;
        let a = self.attend(tape, store, lora, "self", tokens, tokens)?;
        let mut tokens = self.project_residual(tape, store, "self", tokens, a)?;
        if self.kind == AttentionKind::Cross {
            let Some(c) = cond else {
                bail!(Contract, "cross-attention module {} needs conditioning tokens", self.index);
            };
            self.check_tokens(tape, tokens, Some(c))?;
            let a = self.attend(tape, store, lora, "cross", tokens, c)?;
            tokens = self.project_residual(tape, store, "cross", tokens, a)?;
        } else if cond.is_some() {
            bail!(Contract, "conditioning passed to self-attention module {}", self.index);
        }
        tape.from_tokens(tokens, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(kind: AttentionKind, channels: usize, cond_dim: usize) -> (AttentionModule, ParamStore) {
        let m = AttentionModule { index: 1, location: BlockLocation::Input, kind, channels, cond_dim, heads: 1 };
        let mut store = ParamStore::new();
        m.register(&mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (m, store)
    }

    #[test]
    fn single_key_returns_value_row() {
        let (m, store) = module(AttentionKind::Cross, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let psi = tape.leaf(Tensor::randn(&[1, 4, 2], 1.0, &mut rng));
        let cond_t = Tensor::randn(&[1, 1, 3], 1.0, &mut rng);
        let cond = tape.leaf(cond_t.clone());
        let out = m.attention_forward(&mut tape, &store, None, psi, Some(cond)).unwrap();
        let wv = &store.get("attn1.cross.w_v").unwrap().value;
        let v_row = wv.matmul(&cond_t.clone().reshape(&[3, 1]).unwrap()).unwrap();
        for n in 0..4 {
            for k in 0..2 {
                assert!((tape.value(out).at(&[0, n, k]) - v_row.data()[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_query_key_is_uniform() {
        let (m, mut store) = module(AttentionKind::SelfAttention, 3, 0);
        store.get_mut("attn1.self.w_q").unwrap().value.data_mut().fill(0.0);
        store.get_mut("attn1.self.w_k").unwrap().value.data_mut().fill(0.0);
        let psi_t = Tensor::randn(&[1, 5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let mut tape = Tape::new();
        let psi = tape.leaf(psi_t.clone());
        let out = m.attention_forward(&mut tape, &store, None, psi, None).unwrap();
        let v = psi_t
            .reshape(&[5, 3])
            .unwrap()
            .matmul(&store.get("attn1.self.w_v").unwrap().value.transpose().unwrap())
            .unwrap();
        for k in 0..3 {
            let mean: f64 = (0..5).map(|n| v.at(&[n, k])).sum::<f64>() / 5.0;
            for n in 0..5 {
                assert!((tape.value(out).at(&[0, n, k]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cond_rules() {
        let (m, store) = module(AttentionKind::SelfAttention, 2, 0);
        let mut tape = Tape::new();
        let psi = tape.leaf(Tensor::zeros(&[1, 3, 2]));
        let c = tape.leaf(Tensor::zeros(&[1, 1, 2]));
        assert!(matches!(
            m.attention_forward(&mut tape, &store, None, psi, Some(c)),
            Err(crate::Error::Contract(_))
        ));
        let (m, store) = module(AttentionKind::Cross, 2, 2);
        assert!(m.attention_forward(&mut tape, &store, None, psi, None).is_err());
    }

    #[test]
    fn permuting_tokens_with_zero_keys_is_invariant() {
        let (m, mut store) = module(AttentionKind::Cross, 2, 3);
        store.get_mut("attn1.cross.w_k").unwrap().value.data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi_t = Tensor::randn(&[1, 4, 2], 1.0, &mut rng);
        let cond_t = Tensor::randn(&[1, 3, 3], 1.0, &mut rng);
        let perm = cond_t.clone().reshape(&[3, 3]).unwrap().select_rows(&[2, 0, 1]).reshape(&[1, 3, 3]).unwrap();
        let run = |c: &Tensor| {
            let mut tape = Tape::new();
            let p = tape.leaf(psi_t.clone());
            let c = tape.leaf(c.clone());
            let o = m.attention_forward(&mut tape, &store, None, p, Some(c)).unwrap();
            tape.value(o).clone()
        };
        assert!(run(&cond_t).max_abs_diff(&run(&perm)) < 1e-14);
    }
}
