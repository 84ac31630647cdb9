//! Compact vision transformer backbone: a strided conv (or bare patch)
//! embedding to stride 16, learned positional embeddings on a reference grid
//! (bilinearly interpolated for other input sizes), optional register
//! tokens, and a stack of pre-norm transformer blocks with **no** final
//! normalization. Every block's output is kept so later stages can fuse or
//! align against arbitrary depths.

use crate::error::{Error, Result};
use crate::nn::{Act, Conv2d, ConvBnAct, Embedding, TransformerBlock};
use crate::params::ParamSet;
use crate::ops;
use crate::params::{ParamVisitor, ParamVisitorMut};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How pixels become stride-16 tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StemKind {
    /// Four 3x3 stride-2 conv+BN+SiLU stages, 3 -> D/8 -> D/4 -> D/2 -> D.
    /// The last conv carries `dilation` (with matching padding) to widen its
    /// receptive field without changing resolution.
    Conv { dilation: usize },
    /// A single bare 16x16 stride-16 convolution with bias and no norm.
    Patch16,
}

impl Default for StemKind {
    fn default() -> Self {
        StemKind::Conv { dilation: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Extra non-spatial tokens prepended to the patch sequence.
    pub registers: usize,
    /// Side length of the positional-embedding reference grid.
    pub pos_grid: usize,
    pub stem: StemKind,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config("backbone dims must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "backbone dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if let StemKind::Conv { dilation } = self.stem {
            if dilation == 0 {
                return Err(Error::config("stem dilation must be positive"));
            }
            if self.dim % 8 != 0 {
                return Err(Error::config(format!(
                    "conv stem needs dim divisible by 8, got {}",
                    self.dim
                )));
            }
        }
        if self.pos_grid == 0 {
            return Err(Error::config("positional grid must be positive"));
        }
        Ok(())
    }
}

enum Stem {
    Conv(Vec<ConvBnAct>),
    Patch16(Conv2d),
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: Stem,
    pos: Embedding,
    reg_tokens: Option<Embedding>,
    reg_pos: Option<Embedding>,
    pub blocks: Vec<TransformerBlock>,
}

/// Per-block token matrices plus the spatial layout they flatten.
pub struct BackboneOutput {
    /// One `[registers + h*w, D]` matrix per block, in depth order.
    pub features: Vec<Tensor>,
    /// Patch grid (rows, cols) at stride 16.
    pub grid: (usize, usize),
    pub registers: usize,
}

impl BackboneOutput {
    /// Spatial tokens of block `idx` with register rows stripped: `[h*w, D]`.
    pub fn patch_tokens(&self, idx: usize) -> Result<Tensor> {
        let t = self
            .features
            .get(idx)
            .ok_or_else(|| Error::input(format!("block index {idx} out of range")))?;
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let hw = n - self.registers;
        let mut data = Vec::with_capacity(hw * d);
        for i in self.registers..n {
            data.extend_from_slice(t.row(i));
        }
        Tensor::new(&[hw, d], data)
    }
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let stem = match cfg.stem {
            StemKind::Conv { dilation } => {
                let widths = [3, d / 8, d / 4, d / 2, d];
                let mut stages = Vec::with_capacity(4);
                for i in 0..4 {
                    let (dil, pad) = if i == 3 { (dilation, dilation) } else { (1, 1) };
                    stages.push(ConvBnAct::new(
                        rng,
                        widths[i],
                        widths[i + 1],
                        3,
                        2,
                        pad,
                        dil,
                        1,
                        Act::Silu,
                    ));
                }
                Stem::Conv(stages)
            }
            StemKind::Patch16 => Stem::Patch16(Conv2d::new(rng, 3, d, 16, 16, 0, 1, 1, true)),
        };
        let pos = Embedding::new(rng, cfg.pos_grid * cfg.pos_grid, d);
        let (reg_tokens, reg_pos) = if cfg.registers > 0 {
            (
                Some(Embedding::new(rng, cfg.registers, d)),
                Some(Embedding::new(rng, cfg.registers, d)),
            )
        } else {
            (None, None)
        };
        let blocks = (0..cfg.depth)
            .map(|_| TransformerBlock::new(rng, d, cfg.heads, cfg.ffn_dim))
            .collect();
        Ok(Backbone { cfg: cfg.clone(), stem, pos, reg_tokens, reg_pos, blocks })
    }

    /// Runs the full stack on an image `[3,H,W]` with H, W multiples of 16.
    pub fn forward(&self, img: &Tensor) -> Result<BackboneOutput> {
        let [c, h, w] = img.shape()[..] else {
            return Err(Error::shape(format!("backbone input: {:?}", img.shape())));
        };
        if c != 3 {
            return Err(Error::shape(format!("backbone expects 3 input channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::input(format!(
                "backbone input {h}x{w} must be a positive multiple of 16"
            )));
        }
        let fmap = match &self.stem {
            Stem::Conv(stages) => {
                let mut x = img.clone();
                for s in stages {
                    x = s.forward(&x)?;
                }
                x
            }
            Stem::Patch16(conv) => conv.forward(img)?,
        };
        let [d, gh, gw] = fmap.shape()[..] else {
            return Err(Error::shape("stem output rank"));
        };
        debug_assert_eq!((gh, gw), (h / 16, w / 16));

        // Flatten [D,gh,gw] -> [gh*gw, D] and add (interpolated) positions.
        let hw = gh * gw;
        let fm = fmap.data();
        let mut tokens = vec![0.0f32; (self.cfg.registers + hw) * d];
        let r = self.cfg.registers;
        for y in 0..gh {
            for x in 0..gw {
                let t = r + y * gw + x;
                for ch in 0..d {
                    tokens[t * d + ch] = fm[ch * gh * gw + y * gw + x];
                }
            }
        }
        let pos = self.interpolated_pos(gh, gw)?;
        for i in 0..hw {
            let prow = pos.row(i);
            for ch in 0..d {
                tokens[(r + i) * d + ch] += prow[ch];
            }
        }
        if let (Some(rt), Some(rp)) = (&self.reg_tokens, &self.reg_pos) {
            for i in 0..r {
                let trow = rt.weight.row(i);
                let prow = rp.weight.row(i);
                for ch in 0..d {
                    tokens[i * d + ch] = trow[ch] + prow[ch];
                }
            }
        }

        let mut x = Tensor::new(&[r + hw, d], tokens)?;
        let mut features = Vec::with_capacity(self.cfg.depth);
        for blk in &self.blocks {
            x = blk.forward(&x)?;
            features.push(x.clone());
        }
        Ok(BackboneOutput { features, grid: (gh, gw), registers: r })
    }

    /// Positional table resampled from the reference grid to `(gh, gw)`.
    fn interpolated_pos(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g = self.cfg.pos_grid;
        let d = self.cfg.dim;
        if (gh, gw) == (g, g) {
            return Ok(self.pos.weight.clone());
        }
        // [g*g, D] -> [D, g, g] -> resize -> [gh*gw, D]
        let src = self.pos.weight.data();
        let mut planes = vec![0.0f32; d * g * g];
        for i in 0..g * g {
            for ch in 0..d {
                planes[ch * g * g + i] = src[i * d + ch];
            }
        }
        let resized = ops::bilinear_resize(&Tensor::new(&[d, g, g], planes)?, gh, gw)?;
        let rs = resized.data();
        let mut out = vec![0.0f32; gh * gw * d];
        for i in 0..gh * gw {
            for ch in 0..d {
                out[i * d + ch] = rs[ch * gh * gw + i];
            }
        }
        Tensor::new(&[gh * gw, d], out)
    }
}

impl ParamSet for Backbone {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        match &self.stem {
            Stem::Conv(stages) => {
                for (i, s) in stages.iter().enumerate() {
                    s.visit(&format!("{prefix}.stem.{i}"), f);
                }
            }
            Stem::Patch16(conv) => conv.visit(&format!("{prefix}.stem.patch"), f),
        }
        self.pos.visit(&format!("{prefix}.pos"), f);
        if let Some(rt) = &self.reg_tokens {
            rt.visit(&format!("{prefix}.reg_tokens"), f);
        }
        if let Some(rp) = &self.reg_pos {
            rp.visit(&format!("{prefix}.reg_pos"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        match &mut self.stem {
            Stem::Conv(stages) => {
                for (i, s) in stages.iter_mut().enumerate() {
                    s.visit_mut(&format!("{prefix}.stem.{i}"), f);
                }
            }
            Stem::Patch16(conv) => conv.visit_mut(&format!("{prefix}.stem.patch"), f),
        }
        self.pos.visit_mut(&format!("{prefix}.pos"), f);
        if let Some(rt) = &mut self.reg_tokens {
            rt.visit_mut(&format!("{prefix}.reg_tokens"), f);
        }
        if let Some(rp) = &mut self.reg_pos {
            rp.visit_mut(&format!("{prefix}.reg_pos"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
    }
}
