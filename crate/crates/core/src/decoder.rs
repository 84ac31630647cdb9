//! Query-based decoders with multi-scale deformable cross-attention.
//!
//! All variants share the same layer skeleton (post-LN): full or structured
//! self-attention over the query tokens, deformable cross-attention into the
//! encoded pyramid, and a feed-forward block. Box and point estimates refine
//! iteratively across layers in inverse-sigmoid space, and every layer has
//! its own prediction heads so intermediate layers can be supervised.
//!
//! Three heads are built on this skeleton:
//! - [`DetDecoder`]: learned content queries, per-layer class + box heads.
//! - [`PoseDecoder`]: one token per (person, part) pair — part 0 is the
//!   instance, the rest are keypoints — with self-attention restricted to
//!   the union of same-person and same-part tokens.
//! - [`MaskHead`]: embedding dot-products between per-query vectors and a
//!   stride-4 pixel map, reusing the detection decoder's tokens.

use crate::error::{Error, Result};
use crate::nn::{self, Act, BatchNorm2d, Conv2d, Embedding, Linear, LayerNorm, Mhsa, Mlp};
use crate::params::ParamSet;
use crate::ops;
use crate::params::{ParamKind, ParamVisitor, ParamVisitorMut};
use crate::pyramid::map_to_tokens;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Token width (matches the encoder width).
    pub dim: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub num_queries: usize,
    /// Heads for both self- and cross-attention.
    pub heads: usize,
    /// Pyramid levels the cross-attention samples from.
    pub levels: usize,
    /// Sampling points per head per level.
    pub points: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.ffn_dim == 0
            || self.num_layers == 0
            || self.num_queries == 0
            || self.heads == 0
            || self.levels == 0
            || self.points == 0
        {
            return Err(Error::config("decoder dims must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "decoder dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Multi-scale deformable cross-attention.
///
/// Each query predicts, per head/level/point, a 2-D offset in normalized
/// image coordinates and an attention logit. Offsets are added to the
/// query's reference point, the (shared, once-per-call) value projection of
/// each level is bilinearly sampled there — locations outside a map read
/// zero — and the samples are mixed with softmax weights taken over all
/// levels x points of a head, then merged by the output projection.
pub struct DeformableAttn {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub offset: Linear,
    pub weight: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl DeformableAttn {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, levels: usize, points: usize) -> Self {
        DeformableAttn {
            heads,
            levels,
            points,
            offset: Linear::new(rng, dim, heads * levels * points * 2, true),
            weight: Linear::new(rng, dim, heads * levels * points, true),
            value: Linear::new(rng, dim, dim, true),
            out: Linear::new(rng, dim, dim, true),
        }
    }

    /// `x` is `[T,C]`, `refs` is `[T,2]` normalized points, `values` are the
    /// value-projected level maps from [`Self::project_values`].
    pub fn forward(&self, x: &Tensor, refs: &Tensor, values: &[Tensor]) -> Result<Tensor> {
        let [t, c] = x.shape()[..] else {
            return Err(Error::shape(format!("deformable query input: {:?}", x.shape())));
        };
        if refs.shape() != [t, 2] {
            return Err(Error::shape(format!(
                "deformable references: {:?}, expected [{t}, 2]",
                refs.shape()
            )));
        }
        if values.len() != self.levels {
            return Err(Error::shape(format!(
                "deformable got {} value maps, configured for {}",
                values.len(),
                self.levels
            )));
        }
        let (heads, levels, points) = (self.heads, self.levels, self.points);
        let dh = c / heads;
        let offsets = self.offset.forward(x)?;
        let logits = self.weight.forward(x)?;

        let mut ctx = vec![0.0f32; t * c];
        ctx.par_chunks_mut(c).enumerate().for_each(|(q, out_row)| {
            let off = offsets.row(q);
            let lg = logits.row(q);
            let rx = refs.row(q)[0];
            let ry = refs.row(q)[1];
            let mut probs = vec![0.0f32; levels * points];
            let mut sample = vec![0.0f32; dh];
            for h in 0..heads {
                ops::softmax_slice(&lg[h * levels * points..(h + 1) * levels * points], &mut probs);
                let ohead = &mut out_row[h * dh..(h + 1) * dh];
                for l in 0..levels {
                    for p in 0..points {
                        let w = probs[l * points + p];
                        if w == 0.0 {
                            continue;
                        }
                        let o = (h * levels * points + l * points + p) * 2;
                        let px = rx + off[o];
                        let py = ry + off[o + 1];
                        sample_channel_range(&values[l], px, py, h * dh, &mut sample);
                        for (acc, &s) in ohead.iter_mut().zip(&sample) {
                            *acc += w * s;
                        }
                    }
                }
            }
        });
        self.out.forward(&Tensor::new(&[t, c], ctx)?)
    }

    /// Applies the shared value projection to every level once, returning
    /// maps shaped like the inputs.
    pub fn project_values(&self, levels: &[Tensor]) -> Result<Vec<Tensor>> {
        levels
            .iter()
            .map(|m| {
                let [_, h, w] = m.shape()[..] else {
                    return Err(Error::shape(format!("value map: {:?}", m.shape())));
                };
                let toks = map_to_tokens(m)?;
                crate::pyramid::tokens_to_map(&self.value.forward(&toks)?, h, w)
            })
            .collect()
    }
}

/// Bilinear sample of channels `[c0, c0+out.len())` at normalized `(px,py)`,
/// zero outside the map.
fn sample_channel_range(map: &Tensor, px: f32, py: f32, c0: usize, out: &mut [f32]) {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let data = map.data();
    let sx = px * w as f32 - 0.5;
    let sy = py * h as f32 - 0.5;
    let x0 = sx.floor() as isize;
    let y0 = sy.floor() as isize;
    let fx = sx - x0 as f32;
    let fy = sy - y0 as f32;
    out.fill(0.0);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (ix, iy, wt) in taps {
        if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize || wt == 0.0 {
            continue;
        }
        let base = iy as usize * w + ix as usize;
        for (k, o) in out.iter_mut().enumerate() {
            *o += data[(c0 + k) * h * w + base] * wt;
        }
    }
}

impl ParamSet for DeformableAttn {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.offset.visit(&format!("{prefix}.offset"), f);
        self.weight.visit(&format!("{prefix}.weight"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.offset.visit_mut(&format!("{prefix}.offset"), f);
        self.weight.visit_mut(&format!("{prefix}.weight"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// Which pairs of query tokens may attend to each other.
pub enum SelfAttnPattern {
    /// Every token attends to every token.
    Full,
    /// Tokens are a `[persons x parts]` grid flattened row-major; a token
    /// attends to the union of its own person's parts and its own part
    /// across persons.
    Union { persons: usize, parts: usize },
}

/// One decoder layer: self-attention, deformable cross-attention, FFN, each
/// with a residual followed by layer norm (post-LN).
pub struct DecoderLayer {
    pub self_attn: Mhsa,
    pub ln1: LayerNorm,
    pub cross: DeformableAttn,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    fn new(rng: &mut ChaCha8Rng, cfg: &DecoderConfig) -> Self {
        DecoderLayer {
            self_attn: Mhsa::new(rng, cfg.dim, cfg.heads),
            ln1: LayerNorm::new(cfg.dim),
            cross: DeformableAttn::new(rng, cfg.dim, cfg.heads, cfg.levels, cfg.points),
            ln2: LayerNorm::new(cfg.dim),
            ffn: Mlp::new(rng, cfg.dim, cfg.ffn_dim, cfg.dim, Act::Gelu),
            ln3: LayerNorm::new(cfg.dim),
        }
    }

    fn forward(
        &self,
        x: &Tensor,
        refs: &Tensor,
        levels: &[Tensor],
        pattern: &SelfAttnPattern,
    ) -> Result<Tensor> {
        let attended = match pattern {
            SelfAttnPattern::Full => self.self_attn.forward(x)?,
            SelfAttnPattern::Union { persons, parts } => {
                union_self_attention(&self.self_attn, x, *persons, *parts)?
            }
        };
        let mut y = x.clone();
        y.add_assign(&attended);
        let y = self.ln1.forward(&y)?;

        let values = self.cross.project_values(levels)?;
        let mut z = y.clone();
        z.add_assign(&self.cross.forward(&y, refs, &values)?);
        let z = self.ln2.forward(&z)?;

        let mut w = z.clone();
        w.add_assign(&self.ffn.forward(&z)?);
        self.ln3.forward(&w)
    }
}

/// Masked self-attention for the `[persons x parts]` token grid, gathering
/// each token's allowed keys instead of materializing a T x T mask: token
/// (i, t) attends to all parts of person i and to part t of every person
/// (`parts + persons - 1` keys).
fn union_self_attention(attn: &Mhsa, x: &Tensor, persons: usize, parts: usize) -> Result<Tensor> {
    let [t, c] = x.shape()[..] else {
        return Err(Error::shape(format!("union attention input: {:?}", x.shape())));
    };
    if t != persons * parts {
        return Err(Error::shape(format!(
            "union attention: {t} tokens vs {persons} persons x {parts} parts"
        )));
    }
    let heads = attn.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let qkv = attn.qkv.forward(x)?;
    let n_keys = parts + persons - 1;

    let mut ctx = vec![0.0f32; t * c];
    ctx.par_chunks_mut(c).enumerate().for_each(|(tok, out_row)| {
        let person = tok / parts;
        let part = tok % parts;
        // Same-person block first, then same-part column (skipping self's person).
        let mut keys = Vec::with_capacity(n_keys);
        for p in 0..parts {
            keys.push(person * parts + p);
        }
        for q in 0..persons {
            if q != person {
                keys.push(q * parts + part);
            }
        }
        let qrow = qkv.row(tok);
        let mut logits = vec![0.0f32; keys.len()];
        let mut probs = vec![0.0f32; keys.len()];
        for h in 0..heads {
            let qh = &qrow[h * dh..(h + 1) * dh];
            for (j, &kidx) in keys.iter().enumerate() {
                let krow = qkv.row(kidx);
                let kh = &krow[c + h * dh..c + (h + 1) * dh];
                logits[j] = crate::tensor::dot(qh, kh) * scale;
            }
            ops::softmax_slice(&logits, &mut probs);
            let ohead = &mut out_row[h * dh..(h + 1) * dh];
            for (j, &kidx) in keys.iter().enumerate() {
                let p = probs[j];
                if p == 0.0 {
                    continue;
                }
                let vrow = qkv.row(kidx);
                let vh = &vrow[2 * c + h * dh..2 * c + (h + 1) * dh];
                for (o, &v) in ohead.iter_mut().zip(vh) {
                    *o += p * v;
                }
            }
        }
    });
    attn.proj.forward(&Tensor::new(&[t, c], ctx)?)
}

/// Stack of linear layers with ReLU between (none after the last).
pub struct MlpHead {
    pub layers: Vec<Linear>,
}

impl MlpHead {
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1], true))
            .collect();
        MlpHead { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            y = l.forward(&y)?;
            if i + 1 < self.layers.len() {
                y = y.map(ops::relu);
            }
        }
        Ok(y)
    }
}

impl ParamSet for MlpHead {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Per-layer detection predictions; boxes are normalized `(cx, cy, w, h)`.
pub struct LayerPrediction {
    pub logits: Tensor,
    pub boxes: Tensor,
}

pub struct DetDecoderOutput {
    /// One prediction set per layer, last is final.
    pub layers: Vec<LayerPrediction>,
    /// Query tokens after each layer, `[N, C]` — consumed by the mask head.
    pub tokens: Vec<Tensor>,
}

pub struct DetDecoder {
    pub cfg: DecoderConfig,
    pub num_classes: usize,
    content: Embedding,
    ref_logits: Tensor,
    layers: Vec<DecoderLayer>,
    cls_heads: Vec<Linear>,
    box_heads: Vec<MlpHead>,
}

impl DetDecoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &DecoderConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::config("detection needs at least one class"));
        }
        let c = cfg.dim;
        let content = Embedding::new(rng, cfg.num_queries, c);
        let ref_logits = nn::uniform_tensor(rng, &[cfg.num_queries, 4], 2.0);
        let layers = (0..cfg.num_layers).map(|_| DecoderLayer::new(rng, cfg)).collect();
        let cls_heads =
            (0..cfg.num_layers).map(|_| Linear::new(rng, c, num_classes, true)).collect();
        let box_heads = (0..cfg.num_layers).map(|_| MlpHead::new(rng, &[c, c, c, 4])).collect();
        Ok(DetDecoder { cfg: cfg.clone(), num_classes, content, ref_logits, layers, cls_heads, box_heads })
    }

    pub fn forward(&self, levels: &[Tensor]) -> Result<DetDecoderOutput> {
        let n = self.cfg.num_queries;
        let mut x = self.content.weight.clone();
        let mut box_logits: Vec<f32> = self.ref_logits.data().to_vec();
        let mut out_layers = Vec::with_capacity(self.cfg.num_layers);
        let mut out_tokens = Vec::with_capacity(self.cfg.num_layers);

        for (li, layer) in self.layers.iter().enumerate() {
            // Reference point of each query: its current box center.
            let refs: Vec<f32> = (0..n)
                .flat_map(|q| {
                    [ops::sigmoid(box_logits[q * 4]), ops::sigmoid(box_logits[q * 4 + 1])]
                })
                .collect();
            let refs = Tensor::new(&[n, 2], refs)?;
            x = layer.forward(&x, &refs, levels, &SelfAttnPattern::Full)?;

            let logits = self.cls_heads[li].forward(&x)?;
            let delta = self.box_heads[li].forward(&x)?;
            for (bl, d) in box_logits.iter_mut().zip(delta.data()) {
                *bl += d;
            }
            let boxes = Tensor::new(&[n, 4], box_logits.iter().map(|&v| ops::sigmoid(v)).collect())?;
            out_layers.push(LayerPrediction { logits, boxes });
            out_tokens.push(x.clone());
        }
        Ok(DetDecoderOutput { layers: out_layers, tokens: out_tokens })
    }
}

impl ParamSet for DetDecoder {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.content.visit(&format!("{prefix}.content"), f);
        f(&format!("{prefix}.ref_logits"), ParamKind::Weight, &self.ref_logits);
        for (i, l) in self.layers.iter().enumerate() {
            visit_layer(l, &format!("{prefix}.layers.{i}"), f);
        }
        for (i, h) in self.cls_heads.iter().enumerate() {
            h.visit(&format!("{prefix}.cls_heads.{i}"), f);
        }
        for (i, h) in self.box_heads.iter().enumerate() {
            h.visit(&format!("{prefix}.box_heads.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.content.visit_mut(&format!("{prefix}.content"), f);
        f(&format!("{prefix}.ref_logits"), ParamKind::Weight, &mut self.ref_logits);
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_layer_mut(l, &format!("{prefix}.layers.{i}"), f);
        }
        for (i, h) in self.cls_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.cls_heads.{i}"), f);
        }
        for (i, h) in self.box_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.box_heads.{i}"), f);
        }
    }
}

fn visit_layer(l: &DecoderLayer, prefix: &str, f: &mut ParamVisitor) {
    l.self_attn.visit(&format!("{prefix}.self_attn"), f);
    l.ln1.visit(&format!("{prefix}.ln1"), f);
    l.cross.visit(&format!("{prefix}.cross"), f);
    l.ln2.visit(&format!("{prefix}.ln2"), f);
    l.ffn.visit(&format!("{prefix}.ffn"), f);
    l.ln3.visit(&format!("{prefix}.ln3"), f);
}

fn visit_layer_mut(l: &mut DecoderLayer, prefix: &str, f: &mut ParamVisitorMut) {
    l.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
    l.ln1.visit_mut(&format!("{prefix}.ln1"), f);
    l.cross.visit_mut(&format!("{prefix}.cross"), f);
    l.ln2.visit_mut(&format!("{prefix}.ln2"), f);
    l.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    l.ln3.visit_mut(&format!("{prefix}.ln3"), f);
}

/// Per-layer pose predictions: person score, box, and per-person keypoints
/// with confidence. Coordinates are normalized.
pub struct PoseLayerPrediction {
    /// `[N, 1]` person logits.
    pub logits: Tensor,
    /// `[N, 4]` boxes, `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// `[N, K, 2]` keypoint positions.
    pub keypoints: Tensor,
    /// `[N, K]` keypoint confidence logits.
    pub kpt_logits: Tensor,
}

pub struct PoseDecoderOutput {
    pub layers: Vec<PoseLayerPrediction>,
}

pub struct PoseDecoder {
    pub cfg: DecoderConfig,
    pub keypoints: usize,
    person_content: Embedding,
    type_embed: Embedding,
    ref_logits: Tensor,
    /// Learned per-part offsets (logit space) from the box center.
    kpt_offsets: Tensor,
    layers: Vec<DecoderLayer>,
    cls_heads: Vec<Linear>,
    box_heads: Vec<MlpHead>,
    kpt_delta_heads: Vec<Linear>,
    kpt_score_heads: Vec<Linear>,
}

impl PoseDecoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &DecoderConfig, keypoints: usize) -> Result<Self> {
        cfg.validate()?;
        if keypoints == 0 {
            return Err(Error::config("pose needs at least one keypoint"));
        }
        let c = cfg.dim;
        Ok(PoseDecoder {
            cfg: cfg.clone(),
            keypoints,
            person_content: Embedding::new(rng, cfg.num_queries, c),
            type_embed: Embedding::new(rng, keypoints + 1, c),
            ref_logits: nn::uniform_tensor(rng, &[cfg.num_queries, 4], 2.0),
            kpt_offsets: nn::uniform_tensor(rng, &[keypoints, 2], 0.5),
            layers: (0..cfg.num_layers).map(|_| DecoderLayer::new(rng, cfg)).collect(),
            cls_heads: (0..cfg.num_layers).map(|_| Linear::new(rng, c, 1, true)).collect(),
            box_heads: (0..cfg.num_layers).map(|_| MlpHead::new(rng, &[c, c, c, 4])).collect(),
            kpt_delta_heads: (0..cfg.num_layers).map(|_| Linear::new(rng, c, 2, true)).collect(),
            kpt_score_heads: (0..cfg.num_layers).map(|_| Linear::new(rng, c, 1, true)).collect(),
        })
    }

    pub fn forward(&self, levels: &[Tensor]) -> Result<PoseDecoderOutput> {
        let n = self.cfg.num_queries;
        let k = self.keypoints;
        let parts = k + 1;
        let c = self.cfg.dim;
        let t = n * parts;

        // Token (q, p) = person_content[q] + type_embed[p].
        let mut tokens = vec![0.0f32; t * c];
        for q in 0..n {
            let person = self.person_content.weight.row(q);
            for p in 0..parts {
                let ty = self.type_embed.weight.row(p);
                let row = &mut tokens[(q * parts + p) * c..(q * parts + p + 1) * c];
                for ch in 0..c {
                    row[ch] = person[ch] + ty[ch];
                }
            }
        }
        let mut x = Tensor::new(&[t, c], tokens)?;

        let mut box_logits: Vec<f32> = self.ref_logits.data().to_vec();
        // Keypoint logits start at the box center shifted by learned
        // per-part offsets, and refine independently afterwards.
        let mut kpt_logits = vec![0.0f32; n * k * 2];
        for q in 0..n {
            for kp in 0..k {
                kpt_logits[(q * k + kp) * 2] = box_logits[q * 4] + self.kpt_offsets.data()[kp * 2];
                kpt_logits[(q * k + kp) * 2 + 1] =
                    box_logits[q * 4 + 1] + self.kpt_offsets.data()[kp * 2 + 1];
            }
        }

        let pattern = SelfAttnPattern::Union { persons: n, parts };
        let mut out_layers = Vec::with_capacity(self.cfg.num_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            // Instance tokens anchor at the box center, keypoint tokens at
            // their own current estimate.
            let mut refs = vec![0.0f32; t * 2];
            for q in 0..n {
                refs[(q * parts) * 2] = ops::sigmoid(box_logits[q * 4]);
                refs[(q * parts) * 2 + 1] = ops::sigmoid(box_logits[q * 4 + 1]);
                for kp in 0..k {
                    let tok = q * parts + 1 + kp;
                    refs[tok * 2] = ops::sigmoid(kpt_logits[(q * k + kp) * 2]);
                    refs[tok * 2 + 1] = ops::sigmoid(kpt_logits[(q * k + kp) * 2 + 1]);
                }
            }
            let refs = Tensor::new(&[t, 2], refs)?;
            x = layer.forward(&x, &refs, levels, &pattern)?;

            // Split tokens back into instance and keypoint views.
            let mut inst = vec![0.0f32; n * c];
            let mut kpt = vec![0.0f32; n * k * c];
            for q in 0..n {
                inst[q * c..(q + 1) * c].copy_from_slice(x.row(q * parts));
                for kp in 0..k {
                    kpt[(q * k + kp) * c..(q * k + kp + 1) * c]
                        .copy_from_slice(x.row(q * parts + 1 + kp));
                }
            }
            let inst = Tensor::new(&[n, c], inst)?;
            let kpt = Tensor::new(&[n * k, c], kpt)?;

            let logits = self.cls_heads[li].forward(&inst)?;
            let box_delta = self.box_heads[li].forward(&inst)?;
            for (bl, d) in box_logits.iter_mut().zip(box_delta.data()) {
                *bl += d;
            }
            let kd = self.kpt_delta_heads[li].forward(&kpt)?;
            for (kl, d) in kpt_logits.iter_mut().zip(kd.data()) {
                *kl += d;
            }
            let kpt_score = self.kpt_score_heads[li].forward(&kpt)?;

            let boxes =
                Tensor::new(&[n, 4], box_logits.iter().map(|&v| ops::sigmoid(v)).collect())?;
            let keypoints =
                Tensor::new(&[n, k, 2], kpt_logits.iter().map(|&v| ops::sigmoid(v)).collect())?;
            let kpt_logits_t = kpt_score.reshape(&[n, k])?;
            out_layers.push(PoseLayerPrediction { logits, boxes, keypoints, kpt_logits: kpt_logits_t });
        }
        Ok(PoseDecoderOutput { layers: out_layers })
    }
}

impl ParamSet for PoseDecoder {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.person_content.visit(&format!("{prefix}.person_content"), f);
        self.type_embed.visit(&format!("{prefix}.type_embed"), f);
        f(&format!("{prefix}.ref_logits"), ParamKind::Weight, &self.ref_logits);
        f(&format!("{prefix}.kpt_offsets"), ParamKind::Weight, &self.kpt_offsets);
        for (i, l) in self.layers.iter().enumerate() {
            visit_layer(l, &format!("{prefix}.layers.{i}"), f);
        }
        for (i, h) in self.cls_heads.iter().enumerate() {
            h.visit(&format!("{prefix}.cls_heads.{i}"), f);
        }
        for (i, h) in self.box_heads.iter().enumerate() {
            h.visit(&format!("{prefix}.box_heads.{i}"), f);
        }
        for (i, h) in self.kpt_delta_heads.iter().enumerate() {
            h.visit(&format!("{prefix}.kpt_delta_heads.{i}"), f);
        }
        for (i, h) in self.kpt_score_heads.iter().enumerate() {
            h.visit(&format!("{prefix}.kpt_score_heads.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.person_content.visit_mut(&format!("{prefix}.person_content"), f);
        self.type_embed.visit_mut(&format!("{prefix}.type_embed"), f);
        f(&format!("{prefix}.ref_logits"), ParamKind::Weight, &mut self.ref_logits);
        f(&format!("{prefix}.kpt_offsets"), ParamKind::Weight, &mut self.kpt_offsets);
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_layer_mut(l, &format!("{prefix}.layers.{i}"), f);
        }
        for (i, h) in self.cls_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.cls_heads.{i}"), f);
        }
        for (i, h) in self.box_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.box_heads.{i}"), f);
        }
        for (i, h) in self.kpt_delta_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.kpt_delta_heads.{i}"), f);
        }
        for (i, h) in self.kpt_score_heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.kpt_score_heads.{i}"), f);
        }
    }
}

/// Instance mask head: a stride-4 pixel embedding map (computed once) dotted
/// with a per-query embedding (computed per decoder layer, so intermediate
/// layers can be supervised).
pub struct MaskHead {
    pub dim: usize,
    /// Embedding width, `dim / 2`.
    pub embed_dim: usize,
    dw_conv: Conv2d,
    dw_bn: BatchNorm2d,
    pixel_mlp: MlpHead,
    query_mlp: MlpHead,
}

impl MaskHead {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::config(format!("mask head dim {dim} must be even")));
        }
        let e = dim / 2;
        Ok(MaskHead {
            dim,
            embed_dim: e,
            dw_conv: Conv2d::new(rng, dim, dim, 3, 1, 1, 1, dim, true),
            dw_bn: BatchNorm2d::new(dim),
            pixel_mlp: MlpHead::new(rng, &[dim, dim, e]),
            query_mlp: MlpHead::new(rng, &[dim, dim, e]),
        })
    }

    /// Pixel embedding map `[E, H/4, W/4]` from the stride-8 encoder level.
    pub fn pixel_embeddings(&self, e8: &Tensor) -> Result<Tensor> {
        let [_, h8, w8] = e8.shape()[..] else {
            return Err(Error::shape(format!("mask head input: {:?}", e8.shape())));
        };
        let up = ops::bilinear_resize(e8, h8 * 2, w8 * 2)?;
        let refined = self.dw_bn.forward(&self.dw_conv.forward(&up)?)?;
        let toks = map_to_tokens(&refined)?;
        let emb = self.pixel_mlp.forward(&toks)?;
        crate::pyramid::tokens_to_map(&emb, h8 * 2, w8 * 2)
    }

    /// Mask logits `[N, H/4, W/4]` for one layer's query tokens.
    pub fn masks(&self, pixel_emb: &Tensor, query_tokens: &Tensor) -> Result<Tensor> {
        let [e, h, w] = pixel_emb.shape()[..] else {
            return Err(Error::shape(format!("pixel embeddings: {:?}", pixel_emb.shape())));
        };
        let q = self.query_mlp.forward(query_tokens)?;
        if q.shape()[1] != e {
            return Err(Error::shape(format!(
                "mask embedding width: queries {} vs pixels {e}",
                q.shape()[1]
            )));
        }
        let n = q.shape()[0];
        let pix = pixel_emb.data();
        let mut out = vec![0.0f32; n * h * w];
        out.par_chunks_mut(h * w).enumerate().for_each(|(qi, plane)| {
            let qrow = q.row(qi);
            for (i, o) in plane.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (ch, &qv) in qrow.iter().enumerate() {
                    acc += qv * pix[ch * h * w + i];
                }
                *o = acc;
            }
        });
        Tensor::new(&[n, h, w], out)
    }
}

impl ParamSet for MaskHead {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.dw_conv.visit(&format!("{prefix}.dw_conv"), f);
        self.dw_bn.visit(&format!("{prefix}.dw_bn"), f);
        self.pixel_mlp.visit(&format!("{prefix}.pixel_mlp"), f);
        self.query_mlp.visit(&format!("{prefix}.query_mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.dw_conv.visit_mut(&format!("{prefix}.dw_conv"), f);
        self.dw_bn.visit_mut(&format!("{prefix}.dw_bn"), f);
        self.pixel_mlp.visit_mut(&format!("{prefix}.pixel_mlp"), f);
        self.query_mlp.visit_mut(&format!("{prefix}.query_mlp"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::count_weights;
    use rand::SeedableRng;

    fn dec_cfg() -> DecoderConfig {
        DecoderConfig {
            dim: 192,
            ffn_dim: 512,
            num_layers: 4,
            num_queries: 300,
            heads: 8,
            levels: 3,
            points: 4,
        }
    }

    fn tiny_cfg() -> DecoderConfig {
        DecoderConfig {
            dim: 16,
            ffn_dim: 32,
            num_layers: 2,
            num_queries: 5,
            heads: 2,
            levels: 3,
            points: 2,
        }
    }

    fn tiny_levels() -> Vec<Tensor> {
        vec![
            Tensor::full(&[16, 8, 8], 0.3),
            Tensor::full(&[16, 4, 4], -0.2),
            Tensor::full(&[16, 2, 2], 0.1),
        ]
    }

    #[test]
    fn det_decoder_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = DetDecoder::new(&mut rng, &dec_cfg(), 80).unwrap();
        assert_eq!(count_weights(&dec), 2_325_632);
    }

    #[test]
    fn pose_decoder_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = PoseDecoder::new(&mut rng, &dec_cfg(), 17).unwrap();
        assert_eq!(count_weights(&dec), 2_270_450);
    }

    #[test]
    fn mask_head_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mh = MaskHead::new(&mut rng, 192).unwrap();
        assert_eq!(count_weights(&mh), 113_472);
    }

    #[test]
    fn det_forward_boxes_in_unit_range_all_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dec = DetDecoder::new(&mut rng, &tiny_cfg(), 7).unwrap();
        let out = dec.forward(&tiny_levels()).unwrap();
        assert_eq!(out.layers.len(), 2);
        for layer in &out.layers {
            assert_eq!(layer.logits.shape(), &[5, 7]);
            assert_eq!(layer.boxes.shape(), &[5, 4]);
            for &v in layer.boxes.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn pose_forward_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dec = PoseDecoder::new(&mut rng, &tiny_cfg(), 3).unwrap();
        let out = dec.forward(&tiny_levels()).unwrap();
        let last = out.layers.last().unwrap();
        assert_eq!(last.logits.shape(), &[5, 1]);
        assert_eq!(last.boxes.shape(), &[5, 4]);
        assert_eq!(last.keypoints.shape(), &[5, 3, 2]);
        assert_eq!(last.kpt_logits.shape(), &[5, 3]);
        for &v in last.keypoints.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn union_attention_matches_full_when_grid_is_one_person() {
        // With a single person every token shares the person, so the union
        // pattern covers all pairs and must equal unmasked attention.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = Mhsa::new(&mut rng, 16, 2);
        let x = nn::uniform_tensor(&mut rng, &[6, 16], 1.0);
        let full = attn.forward(&x).unwrap();
        let union = union_self_attention(&attn, &x, 1, 6).unwrap();
        for (a, b) in full.data().iter().zip(union.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn union_attention_ignores_unrelated_tokens() {
        // 2 persons x 2 parts. Token (0,0) may see (0,1) and (1,0) but not
        // (1,1); perturbing (1,1) must not change token (0,0)'s output.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = Mhsa::new(&mut rng, 8, 2);
        let mut data: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let x1 = Tensor::new(&[4, 8], data.clone()).unwrap();
        for v in &mut data[24..32] {
            *v += 5.0;
        }
        let x2 = Tensor::new(&[4, 8], data).unwrap();
        let y1 = union_self_attention(&attn, &x1, 2, 2).unwrap();
        let y2 = union_self_attention(&attn, &x2, 2, 2).unwrap();
        for (a, b) in y1.row(0).iter().zip(y2.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
        // while a token that can see (1,1) does change
        let moved = y1
            .row(3)
            .iter()
            .zip(y2.row(3))
            .any(|(a, b)| (a - b).abs() > 1e-4);
        assert!(moved);
    }

    #[test]
    fn deformable_with_zero_offsets_single_point_reads_reference() {
        // One level, one point, offsets forced to zero: the context is just
        // the value map sampled at the reference, then output-projected.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut attn = DeformableAttn::new(&mut rng, 8, 2, 1, 1);
        attn.offset.weight = Tensor::zeros(&[4, 8]);
        attn.offset.bias = Some(Tensor::zeros(&[4]));
        let level = nn::uniform_tensor(&mut rng, &[8, 6, 6], 1.0);
        let values = attn.project_values(std::slice::from_ref(&level)).unwrap();
        let x = nn::uniform_tensor(&mut rng, &[3, 8], 1.0);
        let refs = Tensor::new(&[3, 2], vec![0.3, 0.4, 0.6, 0.2, 0.5, 0.9]).unwrap();
        let got = attn.forward(&x, &refs, &values).unwrap();

        let mut direct = vec![0.0f32; 3 * 8];
        for q in 0..3 {
            ops::sample_point(&values[0], refs.row(q)[0], refs.row(q)[1], &mut direct[q * 8..(q + 1) * 8])
                .unwrap();
        }
        let expect = attn.out.forward(&Tensor::new(&[3, 8], direct).unwrap()).unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_head_output_is_stride_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mh = MaskHead::new(&mut rng, 16).unwrap();
        let e8 = Tensor::full(&[16, 4, 6], 0.2);
        let pix = mh.pixel_embeddings(&e8).unwrap();
        assert_eq!(pix.shape(), &[8, 8, 12]);
        let queries = nn::uniform_tensor(&mut rng, &[5, 16], 1.0);
        let m = mh.masks(&pix, &queries).unwrap();
        assert_eq!(m.shape(), &[5, 8, 12]);
    }
}
