//! Parameterized layers: linear, convolution, normalization, MLP, multi-head
//! self-attention, and the pre-norm transformer block they compose into.
//!
//! Layers own their weights as [`Tensor`]s and register them through
//! [`crate::params::ParamSet`], which gives every model a flat, named,
//! deterministic parameter walk for counting, saving, and loading.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{ParamKind, ParamSet, ParamVisitor, ParamVisitorMut};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Elementwise nonlinearity selector for [`Mlp`] and conv stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Relu,
    Silu,
    None,
}

impl Act {
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Act::Gelu => ops::gelu(v),
            Act::Relu => ops::relu(v),
            Act::Silu => ops::silu(v),
            Act::None => v,
        }
    }

    fn apply_tensor(self, t: Tensor) -> Tensor {
        if self == Act::None {
            t
        } else {
            t.map(|v| self.apply(v))
        }
    }
}

pub(crate) fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("uniform init")
}

/// Affine map `x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Linear {
            weight: uniform_tensor(rng, &[d_out, d_in], bound),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), ParamKind::Weight, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), ParamKind::Weight, b);
        }
    }
}

/// 2-D convolution layer; weight layout `[C_out, C_in/groups, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Conv2d {
            weight: uniform_tensor(rng, &[c_out, c_in / groups, k, k], bound),
            bias: bias.then(|| Tensor::zeros(&[c_out])),
            stride,
            padding,
            dilation,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
            self.dilation,
            self.groups,
        )
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), ParamKind::Weight, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), ParamKind::Weight, b);
        }
    }
}

/// Inference-mode batch norm over `[C,H,W]`: running statistics are buffers,
/// not learnable weights, and are excluded from parameter counts.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            weight: Tensor::full(&[c], 1.0),
            bias: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], 1.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::shape(format!("batch_norm input: {:?}", x.shape())));
        };
        if self.weight.shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm channels: input {c}, affine {:?}",
                self.weight.shape()
            )));
        }
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let scale = self.weight.data()[ch]
                / (self.running_var.data()[ch] + self.eps).sqrt();
            let shift = self.bias.data()[ch] - self.running_mean.data()[ch] * scale;
            for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                *v = *v * scale + shift;
            }
        }
        Tensor::new(&[c, h, w], out)
    }
}

impl ParamSet for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &self.weight);
        f(&format!("{prefix}.bias"), ParamKind::Weight, &self.bias);
        f(&format!("{prefix}.running_mean"), ParamKind::Buffer, &self.running_mean);
        f(&format!("{prefix}.running_var"), ParamKind::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &mut self.weight);
        f(&format!("{prefix}.bias"), ParamKind::Weight, &mut self.bias);
        f(&format!("{prefix}.running_mean"), ParamKind::Buffer, &mut self.running_mean);
        f(&format!("{prefix}.running_var"), ParamKind::Buffer, &mut self.running_var);
    }
}

/// Convolution + batch norm + activation, the basic CNN building block here.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        act: Act,
    ) -> Self {
        ConvBnAct {
            conv: Conv2d::new(rng, c_in, c_out, k, stride, padding, dilation, groups, true),
            bn: BatchNorm2d::new(c_out),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.act.apply_tensor(self.bn.forward(&self.conv.forward(x)?)?))
    }
}

impl ParamSet for ConvBnAct {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

/// Per-token layer normalization with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            weight: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.weight, &self.bias, self.eps)
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &self.weight);
        f(&format!("{prefix}.bias"), ParamKind::Weight, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &mut self.weight);
        f(&format!("{prefix}.bias"), ParamKind::Weight, &mut self.bias);
    }
}

/// Two-layer feed-forward network with a pointwise nonlinearity between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Act,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_out: usize, act: Act) -> Self {
        Mlp {
            fc1: Linear::new(rng, d_in, hidden, true),
            fc2: Linear::new(rng, hidden, d_out, true),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply_tensor(self.fc1.forward(x)?))
    }
}

impl ParamSet for Mlp {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Multi-head self-attention with a fused QKV projection and output
/// projection, on a token matrix `[n,D]`.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        assert!(d % heads == 0, "model dim {d} not divisible by heads {heads}");
        Mhsa {
            qkv: Linear::new(rng, d, 3 * d, true),
            proj: Linear::new(rng, d, d, true),
            heads,
        }
    }

    /// Full self-attention. Optionally `q_tokens` restricts the query side to
    /// the first `q_tokens` rows while keys/values span all rows (unused by
    /// the plain transformer stack, handy for diagnostics).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [n, d] = x.shape()[..] else {
            return Err(Error::shape(format!("attention input: {:?}", x.shape())));
        };
        let qkv = self.qkv.forward(x)?;
        let (q, k, v) = split_qkv(&qkv, n, d);
        let ctx = attention(&q, &k, &v, n, n, d, self.heads);
        self.proj.forward(&Tensor::new(&[n, d], ctx)?)
    }

    /// Cross-attention with separate query and key/value token matrices,
    /// reusing this layer's projections: queries take the Q third of the QKV
    /// weight, keys/values take the K and V thirds.
    pub fn forward_cross(&self, xq: &Tensor, xkv: &Tensor) -> Result<Tensor> {
        let [nq, d] = xq.shape()[..] else {
            return Err(Error::shape(format!("attention query input: {:?}", xq.shape())));
        };
        let nk = xkv.shape()[0];
        let qkv_q = self.qkv.forward(xq)?;
        let qkv_k = self.qkv.forward(xkv)?;
        let (q, _, _) = split_qkv(&qkv_q, nq, d);
        let (_, k, v) = split_qkv(&qkv_k, nk, d);
        let ctx = attention(&q, &k, &v, nq, nk, d, self.heads);
        self.proj.forward(&Tensor::new(&[nq, d], ctx)?)
    }
}

fn split_qkv(qkv: &Tensor, n: usize, d: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut q = vec![0.0f32; n * d];
    let mut k = vec![0.0f32; n * d];
    let mut v = vec![0.0f32; n * d];
    for i in 0..n {
        let row = qkv.row(i);
        q[i * d..(i + 1) * d].copy_from_slice(&row[0..d]);
        k[i * d..(i + 1) * d].copy_from_slice(&row[d..2 * d]);
        v[i * d..(i + 1) * d].copy_from_slice(&row[2 * d..3 * d]);
    }
    (q, k, v)
}

/// Scaled dot-product attention over flat `[n,D]` buffers split into heads.
pub(crate) fn attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> Vec<f32> {
    use rayon::prelude::*;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; nq * d];
    // Parallelize over query rows; each row owns its output slice.
    out.par_chunks_mut(d).enumerate().for_each(|(i, orow)| {
        let mut logits = vec![0.0f32; nk];
        let mut probs = vec![0.0f32; nk];
        for h in 0..heads {
            let qrow = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, lg) in logits.iter_mut().enumerate() {
                let krow = &k[j * d + h * dh..j * d + (h + 1) * dh];
                *lg = crate::tensor::dot(qrow, krow) * scale;
            }
            ops::softmax_slice(&logits, &mut probs);
            let ohead = &mut orow[h * dh..(h + 1) * dh];
            for (j, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let vrow = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &vv) in ohead.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    });
    out
}

impl ParamSet for Mhsa {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.qkv.visit(&format!("{prefix}.qkv"), f);
        self.proj.visit(&format!("{prefix}.proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.qkv.visit_mut(&format!("{prefix}.qkv"), f);
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize, ffn_dim: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(d),
            attn: Mhsa::new(rng, d, heads),
            ln2: LayerNorm::new(d),
            ffn: Mlp::new(rng, d, ffn_dim, d, Act::Gelu),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        y.add_assign(&self.attn.forward(&self.ln1.forward(x)?)?);
        let mut z = y.clone();
        z.add_assign(&self.ffn.forward(&self.ln2.forward(&y)?)?);
        Ok(z)
    }
}

impl ParamSet for TransformerBlock {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

/// Learned embedding table `[n, D]`, e.g. positional or query embeddings.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub weight: Tensor,
}

impl Embedding {
    pub fn new(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Self {
        Embedding { weight: uniform_tensor(rng, &[n, d], 0.02) }
    }
}

impl ParamSet for Embedding {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &mut self.weight);
    }
}
