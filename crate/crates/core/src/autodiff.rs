//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation executed during a forward pass together
//! with the values its backward rule needs. [`Tape::backward`] replays the
//! tape in reverse exactly once per entry. Parameters enter the tape by name
//! through [`Tape::param`], which is how gradients are keyed in a [`GradMap`].

use crate::error::{bail, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};
use indexmap::IndexMap;
use rayon::prelude::*;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var, Var),
    Linear(Var, Var, Option<Var>),
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    Silu(Var),
    Tanh(Var),
    Softmax(Var, usize),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ToTokens(Var),
    FromTokens(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

/// Gradients keyed by parameter name, with the global L2 norm of their
/// concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    grads: IndexMap<String, Tensor>,
    norm: f64,
}

impl GradMap {
    pub fn new(grads: IndexMap<String, Tensor>) -> Self {
        let norm = grads.values().fold(0.0, |acc, g| acc + g.sq_norm()).sqrt();
        Self { grads, norm }
    }

    /// Zero gradients for the given names and shapes.
    pub fn zeros<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let grads = entries
            .into_iter()
            .map(|(name, shape)| (name.to_string(), Tensor::zeros(shape)))
            .collect();
        Self { grads, norm: 0.0 }
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.grads.values().map(Tensor::numel).sum()
    }

    /// Multiply every entry by `factor` and refresh the norm.
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        self.refresh_norm();
    }

    /// Elementwise `self += other`. Keys must match.
    pub fn add_assign(&mut self, other: &GradMap) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            bail!(Contract, "gradient maps have different key sets");
        }
        for (name, g) in self.grads.iter_mut() {
            let Some(o) = other.grads.get(name) else {
                bail!(Contract, "gradient for {name} missing from the addend");
            };
            if o.shape() != g.shape() {
                bail!(Dimension, "gradient {name}: {:?} vs {:?}", g.shape(), o.shape());
            }
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
        self.refresh_norm();
        Ok(())
    }

    /// Concatenate all entries in key order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for g in self.grads.values() {
            out.extend_from_slice(g.data());
        }
        out
    }

    /// Overwrite all entries from a flat buffer laid out as in [`GradMap::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            bail!(Dimension, "flat buffer of {} for {} gradient values", flat.len(), self.numel());
        }
        let mut offset = 0;
        for g in self.grads.values_mut() {
            let n = g.numel();
            g.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.refresh_norm();
        Ok(())
    }

    fn refresh_norm(&mut self) {
        self.norm = self.grads.values().fold(0.0, |acc, g| acc + g.sq_norm()).sqrt();
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: shapes {:?} and {:?}", a.shape(), b.shape());
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant or free leaf. Gradients flow to it iff
    /// `value.requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a named parameter leaf, reusing the node if the name was
    /// already placed on this tape.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    /// Look up a parameter in `store` and place it on the tape.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let Some(p) = store.get(name) else {
            bail!(Contract, "unknown parameter {name}");
        };
        let value = p.value.clone().with_grad(p.trainable);
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            bail!(Dimension, "matmul of {:?} and {:?}", sa, sb);
        }
        let (batch, m, k, n) = if sa.len() == 2 {
            (1, sa[0], sa[1], sb[1])
        } else {
            (sa[0], sa[1], sa[2], sb[2])
        };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for s in 0..batch {
            tensor::gemm(
                &ad[s * m * k..(s + 1) * m * k],
                &bd[s * k * n..(s + 1) * k * n],
                &mut out[s * m * n..(s + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            bail!(Dimension, "transpose of {:?}", s);
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            tensor::transpose_into(&src[b * m * n..(b + 1) * m * n], &mut out[b * m * n..(b + 1) * m * n], m, n);
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// `x[b, c, ...] + v[c]` or `x[b, c, ...] + v[b, c]`, broadcasting `v`
    /// over the trailing dimensions of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        let per_sample = match sv.len() {
            1 if sx.len() >= 2 && sv[0] == sx[1] => false,
            2 if sx.len() >= 2 && sv[0] == sx[0] && sv[1] == sx[1] => true,
            _ => bail!(Dimension, "add_channel of {:?} and {:?}", sx, sv),
        };
        let (b, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for s in 0..b {
            for ch in 0..c {
                let add = if per_sample { vd[s * c + ch] } else { vd[ch] };
                out[(s * c + ch) * inner..(s * c + ch + 1) * inner].iter_mut().for_each(|o| *o += add);
            }
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(value, Op::AddChannel(x, v), &[x, v]))
    }

    /// `x[..., in] · w[out, in]ᵀ (+ bias[out])`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[1] {
            bail!(Dimension, "linear of {:?} with weight {:?}", sx, sw);
        }
        let (out_f, in_f) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                bail!(Dimension, "linear bias {:?} for {} outputs", self.shape(b), out_f);
            }
        }
        let rows = self.value(x).numel() / in_f;
        let mut out = vec![0.0; rows * out_f];
        tensor::gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, rows, in_f, out_f);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                for (o, bv) in out[r * out_f..(r + 1) * out_f].iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_f;
        let value = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(bias).collect();
        Ok(self.push(value, Op::Linear(x, w, bias), &inputs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = tensor::conv2d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(value, Op::Conv2d { x, w, stride, padding }, &[x, w]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = tensor::softmax(self.value(a), axis)?;
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    /// Nearest-neighbour 2x upsampling of `[b, c, h, w]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            bail!(Dimension, "upsample2x of {:?}", s);
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(a).data();
        let mut out = vec![0.0; bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + x] = src[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(a), &[a]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            bail!(Dimension, "concat_channels of {:?} and {:?}", sa, sb);
        }
        let hw = sa[2] * sa[3];
        let (ca, cb) = (sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa[0] * (ca + cb) * hw);
        for s in 0..sa[0] {
            out.extend_from_slice(&ad[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bd[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(&[sa[0], ca + cb, sa[2], sa[3]], out)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// `[b, c, h, w] -> [b, h·w, c]`.
    pub fn to_tokens(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            bail!(Dimension, "to_tokens of {:?}", s);
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            tensor::transpose_into(&src[i * c * hw..(i + 1) * c * hw], &mut out[i * c * hw..(i + 1) * c * hw], c, hw);
        }
        let value = Tensor::new(&[b, hw, c], out)?;
        Ok(self.push(value, Op::ToTokens(a), &[a]))
    }

    /// `[b, h·w, c] -> [b, c, h, w]`.
    pub fn from_tokens(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] != h * w {
            bail!(Dimension, "from_tokens of {:?} into {}x{}", s, h, w);
        }
        let (b, hw, c) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            tensor::transpose_into(&src[i * c * hw..(i + 1) * c * hw], &mut out[i * c * hw..(i + 1) * c * hw], hw, c);
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(value, Op::FromTokens(a), &[a]))
    }

    /// `[b, n, heads·d] -> [b·heads, n, d]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            bail!(Dimension, "split_heads of {:?} into {} heads", s, heads);
        }
        if heads == 1 {
            return Ok(a);
        }
        let (b, n, d) = (s[0], s[1], s[2] / heads);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let from = (i * n + t) * heads * d + h * d;
                    let to = ((i * heads + h) * n + t) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let value = Tensor::new(&[b * heads, n, d], out)?;
        Ok(self.push(value, Op::SplitHeads(a, heads), &[a]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            bail!(Dimension, "merge_heads of {:?} from {} heads", s, heads);
        }
        if heads == 1 {
            return Ok(a);
        }
        let (b, n, d) = (s[0] / heads, s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let to = (i * n + t) * heads * d + h * d;
                    let from = ((i * heads + h) * n + t) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let value = Tensor::new(&[b, n, heads * d], out)?;
        Ok(self.push(value, Op::MergeHeads(a, heads), &[a]))
    }

    /// Rows of `table[rows, d]` selected by `indices`, giving `[len, d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "gather from {:?}", s);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            bail!(Contract, "row {} out of range for a {}-row table", bad, s[0]);
        }
        let value = self.value(table).select_rows(indices);
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), &[table]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().with_grad(false).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(0.0, |acc, v| acc + v) / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// `[b, c, h, w] -> [b, c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            bail!(Dimension, "global_avg_pool of {:?}", s);
        }
        let hw = s[2] * s[3];
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|c| c.iter().fold(0.0, |acc, v| acc + v) / hw as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(a), &[a]))
    }

    /// Mean softmax cross-entropy of `logits[b, k]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            bail!(Dimension, "cross_entropy of {:?} with {} labels", s, labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            bail!(Contract, "label {} out of range for {} classes", bad, s[1]);
        }
        let probs = tensor::softmax(self.value(logits), 1)?;
        let loss = labels
            .iter()
            .enumerate()
            .fold(0.0, |acc, (i, &l)| acc - probs.data()[i * s[1] + l].max(1e-300).ln())
            / labels.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, labels.to_vec()), &[logits]))
    }

    /// Gradients of the scalar `loss` for every named parameter on the tape
    /// that requires them. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let grads = self.backward_all(loss)?;
        let mut out = IndexMap::new();
        for (name, &v) in &self.params {
            let node = &self.nodes[v.0];
            if !node.value.requires_grad {
                continue;
            }
            let g = match &grads[v.0] {
                Some(g) => Tensor::new(node.value.shape(), g.clone())?,
                None => Tensor::zeros(node.value.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(GradMap::new(out))
    }

    /// Like [`Tape::backward`] but keyed exactly by the trainable parameters
    /// of `store`, in store order.
    pub fn backward_for(&self, loss: Var, store: &ParamStore) -> Result<GradMap> {
        let mut raw = self.backward(loss)?.grads;
        let mut out = IndexMap::new();
        for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
            let g = raw.swap_remove(name).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.insert(name.to_string(), g);
        }
        Ok(GradMap::new(out))
    }

    /// Gradient of `loss` with respect to an arbitrary leaf.
    pub fn grad_of(&self, loss: Var, leaf: Var) -> Result<Tensor> {
        let grads = self.backward_all(loss)?;
        let shape = self.shape(leaf);
        match &grads[leaf.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(shape)),
        }
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if loss.0 >= self.nodes.len() {
            bail!(Contract, "loss is not a value on this tape");
        }
        if self.value(loss).numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let accumulate = |grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        tensor::gemm_nt(
                            &gy[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for s in 0..batch {
                        tensor::gemm_tn(
                            &ad[s * m * k..(s + 1) * m * k],
                            &gy[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Transpose(a) => {
                let s = y.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = gy.len() / (m * n);
                let mut da = vec![0.0; gy.len()];
                for b in 0..batch {
                    tensor::transpose_into(&gy[b * m * n..(b + 1) * m * n], &mut da[b * m * n..(b + 1) * m * n], m, n);
                }
                accumulate(grads, a, da);
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, gy.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, gy.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, gy.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, gy.iter().map(|g| -g).collect());
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    accumulate(grads, a, gy.iter().zip(bd).map(|(g, x)| g * x).collect());
                }
                if self.wants(b) {
                    accumulate(grads, b, gy.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(a, f) => accumulate(grads, a, gy.iter().map(|g| g * f).collect()),
            &Op::AddChannel(x, v) => {
                if self.wants(x) {
                    accumulate(grads, x, gy.to_vec());
                }
                if self.wants(v) {
                    let sx = self.shape(x);
                    let (b, c) = (sx[0], sx[1]);
                    let inner: usize = sx[2..].iter().product();
                    let per_sample = self.shape(v).len() == 2;
                    let mut dv = vec![0.0; self.value(v).numel()];
                    for s in 0..b {
                        for ch in 0..c {
                            let part = gy[(s * c + ch) * inner..(s * c + ch + 1) * inner]
                                .iter()
                                .fold(0.0, |acc, g| acc + g);
                            dv[if per_sample { s * c + ch } else { ch }] += part;
                        }
                    }
                    accumulate(grads, v, dv);
                }
            }
            &Op::Linear(x, w, bias) => {
                let (out_f, in_f) = (self.shape(w)[0], self.shape(w)[1]);
                let rows = gy.len() / out_f;
                if self.wants(x) {
                    let mut dx = vec![0.0; rows * in_f];
                    tensor::gemm(gy, self.value(w).data(), &mut dx, rows, out_f, in_f);
                    accumulate(grads, x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    tensor::gemm_tn(gy, self.value(x).data(), &mut dw, out_f, rows, in_f);
                    accumulate(grads, w, dw);
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let mut db = vec![0.0; out_f];
                    for r in 0..rows {
                        for (d, g) in db.iter_mut().zip(&gy[r * out_f..(r + 1) * out_f]) {
                            *d += g;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Conv2d { x, w, stride, padding } => {
                let (dx, dw) = tensor::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    gy,
                    stride,
                    padding,
                    self.wants(x),
                    self.wants(w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, dw);
                }
            }
            &Op::Silu(a) => {
                let xd = self.value(a).data();
                let da = gy
                    .iter()
                    .zip(xd)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, a, da);
            }
            &Op::Tanh(a) => {
                let da = gy.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                accumulate(grads, a, da);
            }
            &Op::Softmax(a, axis) => {
                let s = y.shape();
                let len = s[axis];
                let inner: usize = s[axis + 1..].iter().product();
                let outer: usize = s[..axis].iter().product();
                let yd = y.data();
                let mut da = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += gy[base + k * inner] * yd[base + k * inner];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            da[p] = yd[p] * (gy[p] - dot);
                        }
                    }
                }
                accumulate(grads, a, da);
            }
            &Op::Upsample2x(a) => {
                let s = self.shape(a);
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut da = vec![0.0; bc * h * w];
                for p in 0..bc {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            da[p * h * w + (yy / 2) * w + xx / 2] += gy[p * 4 * h * w + yy * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, a, da);
            }
            &Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let hw = sa[2] * sa[3];
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(self.value(a).numel());
                let mut db = Vec::with_capacity(self.value(b).numel());
                for s in 0..sa[0] {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&gy[base..base + ca * hw]);
                    db.extend_from_slice(&gy[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.wants(a) {
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    accumulate(grads, b, db);
                }
            }
            &Op::ToTokens(a) => {
                let s = self.shape(a);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut da = vec![0.0; gy.len()];
                for i in 0..b {
                    tensor::transpose_into(&gy[i * c * hw..(i + 1) * c * hw], &mut da[i * c * hw..(i + 1) * c * hw], hw, c);
                }
                accumulate(grads, a, da);
            }
            &Op::FromTokens(a) => {
                let s = self.shape(a);
                let (b, hw, c) = (s[0], s[1], s[2]);
                let mut da = vec![0.0; gy.len()];
                for i in 0..b {
                    tensor::transpose_into(&gy[i * c * hw..(i + 1) * c * hw], &mut da[i * c * hw..(i + 1) * c * hw], c, hw);
                }
                accumulate(grads, a, da);
            }
            &Op::SplitHeads(a, heads) => {
                let s = self.shape(a);
                let (b, n, d) = (s[0], s[1], s[2] / heads);
                let mut da = vec![0.0; gy.len()];
                for i in 0..b {
                    for t in 0..n {
                        for h in 0..heads {
                            let to = (i * n + t) * heads * d + h * d;
                            let from = ((i * heads + h) * n + t) * d;
                            da[to..to + d].copy_from_slice(&gy[from..from + d]);
                        }
                    }
                }
                accumulate(grads, a, da);
            }
            &Op::MergeHeads(a, heads) => {
                let s = self.shape(a);
                let (b, n, d) = (s[0] / heads, s[1], s[2]);
                let mut da = vec![0.0; gy.len()];
                for i in 0..b {
                    for t in 0..n {
                        for h in 0..heads {
                            let from = (i * n + t) * heads * d + h * d;
                            let to = ((i * heads + h) * n + t) * d;
                            da[to..to + d].copy_from_slice(&gy[from..from + d]);
                        }
                    }
                }
                accumulate(grads, a, da);
            }
            Op::Gather(table, indices) => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (t, g) in dt[i * d..(i + 1) * d].iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                        *t += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            &Op::Reshape(a) => accumulate(grads, a, gy.to_vec()),
            &Op::Sum(a) => accumulate(grads, a, vec![gy[0]; self.value(a).numel()]),
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                accumulate(grads, a, vec![gy[0] / n as f64; n]);
            }
            &Op::GlobalAvgPool(a) => {
                let s = self.shape(a);
                let hw = s[2] * s[3];
                let mut da = Vec::with_capacity(self.value(a).numel());
                for g in gy {
                    da.extend(std::iter::repeat(g / hw as f64).take(hw));
                }
                accumulate(grads, a, da);
            }
            Op::CrossEntropy(logits, labels) => {
                let k = self.shape(*logits)[1];
                let b = labels.len() as f64;
                let probs = tensor::softmax(self.value(*logits), 1).expect("validated in forward");
                let mut da = probs.into_data();
                for (i, &l) in labels.iter().enumerate() {
                    da[i * k + l] -= 1.0;
                }
                da.iter_mut().for_each(|v| *v *= gy[0] / b);
                accumulate(grads, *logits, da);
            }
        }
    }
}

/// One gradient map per sample, each from an independent backward pass over
/// its own tape. Samples may be processed on worker threads; the output
/// order always matches the input order.
pub fn per_sample_grads<S, F>(samples: &[S], store: &ParamStore, loss_fn: F) -> Result<Vec<GradMap>>
where
    S: Sync,
    F: Fn(&mut Tape, &S) -> Result<Var> + Sync,
{
    if samples.is_empty() {
        bail!(Contract, "per-sample gradients of an empty batch");
    }
    samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let loss = loss_fn(&mut tape, s)?;
            tape.backward_for(loss, store)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a scalar from leaves; used both for autodiff and for central
    /// differences.
    type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

    fn grad_check(inputs: &[Tensor], build: &Build) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
        let loss = build(&mut tape, &vars);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = tape.grad_of(loss, vars[k]).unwrap();
            for i in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut t2 = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            t2.leaf(t)
                        })
                        .collect();
                    let l = build(&mut t2, &vs);
                    t2.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                assert!(err < 1e-5, "input {k} entry {i}: autodiff {a} vs numeric {numeric}");
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Contract to a scalar with fixed random weights so every output entry
    /// gets a distinct cotangent.
    fn contract(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let w = rnd(tape.shape(v), seed);
        let w = tape.leaf(w);
        let p = tape.mul(v, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn gradcheck_elementwise_and_matmul() {
        grad_check(&[rnd(&[3, 4], 1), rnd(&[4, 2], 2)], &|t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            contract(t, m, 3)
        });
        grad_check(&[rnd(&[2, 3, 4], 1), rnd(&[2, 4, 2], 2)], &|t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            contract(t, m, 3)
        });
        grad_check(&[rnd(&[2, 3], 4), rnd(&[2, 3], 5)], &|t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let s = t.sub(a, v[1]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let sc = t.scale(m, -0.7);
            let si = t.silu(sc);
            let th = t.tanh(si);
            let tr = t.transpose(th).unwrap();
            contract(t, tr, 6)
        });
    }

    #[test]
    fn gradcheck_layers() {
        grad_check(&[rnd(&[2, 3, 5, 5], 7), rnd(&[4, 3, 3, 3], 8)], &|t, v| {
            let c = t.conv2d(v[0], v[1], 2, 1).unwrap();
            contract(t, c, 9)
        });
        grad_check(&[rnd(&[2, 5, 3], 10), rnd(&[4, 3], 11), rnd(&[4], 12)], &|t, v| {
            let l = t.linear(v[0], v[1], Some(v[2])).unwrap();
            contract(t, l, 13)
        });
        grad_check(&[rnd(&[2, 3, 2, 2], 14), rnd(&[3], 15), rnd(&[2, 3], 16)], &|t, v| {
            let a = t.add_channel(v[0], v[1]).unwrap();
            let b = t.add_channel(a, v[2]).unwrap();
            contract(t, b, 17)
        });
        grad_check(&[rnd(&[3, 5], 18)], &|t, v| {
            let s = t.softmax(v[0], 1).unwrap();
            let s0 = t.softmax(s, 0).unwrap();
            contract(t, s0, 19)
        });
        grad_check(&[rnd(&[1, 2, 2, 3], 20), rnd(&[1, 1, 4, 6], 21)], &|t, v| {
            let u = t.upsample2x(v[0]).unwrap();
            let c = t.concat_channels(u, v[1]).unwrap();
            let tok = t.to_tokens(c).unwrap();
            let sp = t.split_heads(tok, 3).unwrap();
            let mg = t.merge_heads(sp, 3).unwrap();
            let back = t.from_tokens(mg, 4, 6).unwrap();
            let p = t.global_avg_pool(back).unwrap();
            let r = t.reshape(p, &[3]).unwrap();
            contract(t, r, 22)
        });
        grad_check(&[rnd(&[4, 3], 23)], &|t, v| {
            let g = t.gather(v[0], &[2, 0, 2]).unwrap();
            contract(t, g, 24)
        });
        grad_check(&[rnd(&[3, 4], 25), rnd(&[3, 4], 26)], &|t, v| {
            let ce = t.cross_entropy(v[0], &[1, 3, 0]).unwrap();
            let m = t.mse(v[0], v[1]).unwrap();
            let mn = t.mean(v[1]);
            let a = t.add(ce, m).unwrap();
            t.add(a, mn).unwrap()
        });
    }

    #[test]
    fn linear_loss_gives_broadcast_input() {
        let mut store = ParamStore::new();
        store.insert("w", rnd(&[3, 4], 1), ParamGroup::Backbone, true).unwrap();
        let x = rnd(&[1, 4], 2);
        let mut tape = Tape::new();
        let w = tape.param_from(&store, "w").unwrap();
        let xv = tape.leaf(x.clone());
        let y = tape.linear(xv, w, None).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let gw = g.get("w").unwrap();
        for r in 0..3 {
            assert_eq!(&gw.data()[r * 4..(r + 1) * 4], x.data());
        }
    }

    #[test]
    fn frozen_and_unreached_params() {
        let mut store = ParamStore::new();
        store.insert("a", rnd(&[2], 1), ParamGroup::Backbone, true).unwrap();
        store.insert("frozen", rnd(&[2], 2), ParamGroup::Backbone, false).unwrap();
        store.insert("unused", rnd(&[3], 3), ParamGroup::Backbone, true).unwrap();
        let mut tape = Tape::new();
        let a = tape.param_from(&store, "a").unwrap();
        let f = tape.param_from(&store, "frozen").unwrap();
        let m = tape.mul(a, f).unwrap();
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert!(g.get("frozen").is_none());
        let g = tape.backward_for(loss, &store).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["a", "unused"]);
        assert_eq!(g.get("unused").unwrap(), &Tensor::zeros(&[3]));
        assert_eq!(g.get("a").unwrap().data(), store.get("frozen").unwrap().value.data());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(rnd(&[2, 2], 1).with_grad(true));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn linearity_of_backward() {
        let mut store = ParamStore::new();
        store.insert("w", rnd(&[3, 3], 4), ParamGroup::Backbone, true).unwrap();
        let x = rnd(&[2, 3], 5);
        let build = |tape: &mut Tape, which: u8| {
            let w = tape.param_from(&store, "w").unwrap();
            let xv = tape.leaf(x.clone());
            let y = tape.linear(xv, w, None).unwrap();
            let y2 = tape.tanh(y);
            let l1 = tape.mean(y2);
            let sq = tape.mul(y, y).unwrap();
            let l2 = tape.sum(sq);
            match which {
                1 => l1,
                2 => l2,
                _ => {
                    let a = tape.scale(l1, 2.5);
                    let b = tape.scale(l2, -0.5);
                    tape.add(a, b).unwrap()
                }
            }
        };
        let grad = |which| {
            let mut t = Tape::new();
            let l = build(&mut t, which);
            t.backward(l).unwrap().get("w").unwrap().clone()
        };
        let (g1, g2, g) = (grad(1), grad(2), grad(3));
        for i in 0..9 {
            let want = 2.5 * g1.data()[i] - 0.5 * g2.data()[i];
            assert!((g.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn per_sample_sum_matches_summed_loss() {
        let mut store = ParamStore::new();
        store.insert("w", rnd(&[2, 3], 1), ParamGroup::Backbone, true).unwrap();
        store.insert("b", rnd(&[2], 2), ParamGroup::Backbone, true).unwrap();
        let samples: Vec<Tensor> = (0..4).map(|i| rnd(&[1, 3], 10 + i)).collect();
        let loss_fn = |tape: &mut Tape, x: &Tensor| -> Result<Var> {
            let w = tape.param_from(&store, "w")?;
            let b = tape.param_from(&store, "b")?;
            let xv = tape.leaf(x.clone());
            let y = tape.linear(xv, w, Some(b))?;
            let y = tape.silu(y);
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        };
        let per = per_sample_grads(&samples, &store, loss_fn).unwrap();
        assert_eq!(per.len(), 4);
        let mut total = per[0].clone();
        for g in &per[1..] {
            total.add_assign(g).unwrap();
        }
        let mut tape = Tape::new();
        let mut acc = None;
        for s in &samples {
            let l = loss_fn(&mut tape, s).unwrap();
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l).unwrap(),
            });
        }
        let full = tape.backward_for(acc.unwrap(), &store).unwrap();
        for (name, g) in full.iter() {
            let t = total.get(name).unwrap();
            for (a, b) in g.data().iter().zip(t.data()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
        // single sample and duplicated samples
        let one = per_sample_grads(&samples[..1], &store, loss_fn).unwrap();
        assert_eq!(one[0], per[0]);
        let dup = per_sample_grads(&[samples[2].clone(), samples[2].clone()], &store, loss_fn).unwrap();
        assert_eq!(dup[0], dup[1]);
        assert!(per_sample_grads::<Tensor, _>(&[], &store, loss_fn).is_err());
    }

    #[test]
    fn gradmap_norm_is_global() {
        let mut g = IndexMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![3.0, 0.0]).unwrap());
        g.insert("b".to_string(), Tensor::new(&[1], vec![4.0]).unwrap());
        let mut gm = GradMap::new(g);
        assert_eq!(gm.norm(), 5.0);
        gm.scale(0.5);
        assert_eq!(gm.norm(), 2.5);
        assert_eq!(gm.flatten(), vec![1.5, 0.0, 2.0]);
    }
}
