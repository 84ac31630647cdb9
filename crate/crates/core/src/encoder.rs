//! Hybrid efficient encoder: single-scale attention on the coarsest level,
//! cross-scale fusion by convolution everywhere else.
//!
//! The stride-32 map — and only it — passes through one transformer block
//! after adding a fixed 2-D sine/cosine positional encoding. The refreshed
//! coarse map then drives a PAN-style path: top-down fusion to stride 8,
//! bottom-up fusion back to stride 32. Each fusion point concatenates two
//! C-channel maps, reduces 2C -> C with a 1x1 conv, and applies a residual
//! pair of grouped 3x3 convs; downsampling between levels is a full 3x3
//! stride-2 conv. All convs are conv+BN+SiLU.

use crate::error::{Error, Result};
use crate::nn::{Act, ConvBnAct, TransformerBlock};
use crate::params::ParamSet;
use crate::ops;
use crate::params::{ParamVisitor, ParamVisitorMut};
use crate::pyramid::{map_to_tokens, tokens_to_map, PyramidOutput};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channel width of all three levels.
    pub dim: usize,
    /// Feed-forward width of the attention block.
    pub ffn_dim: usize,
    /// Attention heads of the single-scale block.
    pub heads: usize,
    /// Group count of the 3x3 convs inside fusion blocks.
    pub fuse_groups: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ffn_dim == 0 || self.heads == 0 || self.fuse_groups == 0 {
            return Err(Error::config("encoder dims must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config(format!(
                "sincos positional encoding needs dim divisible by 4, got {}",
                self.dim
            )));
        }
        if self.dim % self.fuse_groups != 0 {
            return Err(Error::config(format!(
                "encoder dim {} not divisible by fuse groups {}",
                self.dim, self.fuse_groups
            )));
        }
        Ok(())
    }
}

/// Concat-reduce-refine fusion point: 1x1 reduce 2C -> C, then a residual
/// around a pair of grouped 3x3 convs at width C.
struct FuseBlock {
    reduce: ConvBnAct,
    conv_a: ConvBnAct,
    conv_b: ConvBnAct,
}

impl FuseBlock {
    fn new(rng: &mut ChaCha8Rng, c: usize, groups: usize) -> Self {
        FuseBlock {
            reduce: ConvBnAct::new(rng, 2 * c, c, 1, 1, 0, 1, 1, Act::Silu),
            conv_a: ConvBnAct::new(rng, c, c, 3, 1, 1, 1, groups, Act::Silu),
            conv_b: ConvBnAct::new(rng, c, c, 3, 1, 1, 1, groups, Act::Silu),
        }
    }

    fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.reduce.forward(&concat_channels(a, b)?)?;
        let mut z = self.conv_b.forward(&self.conv_a.forward(&y)?)?;
        z.add_assign(&y);
        Ok(z)
    }
}

impl ParamSet for FuseBlock {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.reduce.visit(&format!("{prefix}.reduce"), f);
        self.conv_a.visit(&format!("{prefix}.conv_a"), f);
        self.conv_b.visit(&format!("{prefix}.conv_b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.reduce.visit_mut(&format!("{prefix}.reduce"), f);
        self.conv_a.visit_mut(&format!("{prefix}.conv_a"), f);
        self.conv_b.visit_mut(&format!("{prefix}.conv_b"), f);
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    attn_block: TransformerBlock,
    fuse_td16: FuseBlock,
    fuse_td8: FuseBlock,
    fuse_bu16: FuseBlock,
    fuse_bu32: FuseBlock,
    down8: ConvBnAct,
    down16: ConvBnAct,
}

/// Encoded pyramid, same shapes as the input pyramid.
pub struct EncoderOutput {
    /// `[C, H/8, W/8]`, `[C, H/16, W/16]`, `[C, H/32, W/32]`.
    pub maps: [Tensor; 3],
}

impl Encoder {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let g = cfg.fuse_groups;
        Ok(Encoder {
            cfg: cfg.clone(),
            attn_block: TransformerBlock::new(rng, c, cfg.heads, cfg.ffn_dim),
            fuse_td16: FuseBlock::new(rng, c, g),
            fuse_td8: FuseBlock::new(rng, c, g),
            fuse_bu16: FuseBlock::new(rng, c, g),
            fuse_bu32: FuseBlock::new(rng, c, g),
            down8: ConvBnAct::new(rng, c, c, 3, 2, 1, 1, 1, Act::Silu),
            down16: ConvBnAct::new(rng, c, c, 3, 2, 1, 1, 1, Act::Silu),
        })
    }

    pub fn forward(&self, pyr: &PyramidOutput) -> Result<EncoderOutput> {
        let [f8, f16, f32_] = &pyr.maps;
        for (m, name) in [(f8, "stride-8"), (f16, "stride-16"), (f32_, "stride-32")] {
            if m.shape().len() != 3 || m.shape()[0] != self.cfg.dim {
                return Err(Error::shape(format!(
                    "encoder {name} map: {:?}, expected [{}, h, w]",
                    m.shape(),
                    self.cfg.dim
                )));
            }
        }

        // Single-scale attention on the coarsest level.
        let (h32, w32) = (f32_.shape()[1], f32_.shape()[2]);
        let mut toks = map_to_tokens(f32_)?;
        toks.add_assign(&sincos_pos_2d(h32, w32, self.cfg.dim)?);
        let refined = self.attn_block.forward(&toks)?;
        let a32 = tokens_to_map(&refined, h32, w32)?;

        // Top-down: coarse to fine.
        let up32 = ops::bilinear_resize(&a32, f16.shape()[1], f16.shape()[2])?;
        let t16 = self.fuse_td16.forward(&up32, f16)?;
        let up16 = ops::bilinear_resize(&t16, f8.shape()[1], f8.shape()[2])?;
        let e8 = self.fuse_td8.forward(&up16, f8)?;

        // Bottom-up: fine back to coarse.
        let d8 = self.down8.forward(&e8)?;
        let e16 = self.fuse_bu16.forward(&d8, &t16)?;
        let d16 = self.down16.forward(&e16)?;
        let e32 = self.fuse_bu32.forward(&d16, &a32)?;

        Ok(EncoderOutput { maps: [e8, e16, e32] })
    }
}

/// Channel-wise concatenation of two `[C,H,W]` maps with equal spatial size.
fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ca, h, w] = a.shape()[..] else {
        return Err(Error::shape(format!("concat input: {:?}", a.shape())));
    };
    let [cb, hb, wb] = b.shape()[..] else {
        return Err(Error::shape(format!("concat input: {:?}", b.shape())));
    };
    if (h, w) != (hb, wb) {
        return Err(Error::shape(format!("concat spatial: {h}x{w} vs {hb}x{wb}")));
    }
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, h, w], data)
}

/// Fixed 2-D sine/cosine positional table `[h*w, d]`, temperature 10_000,
/// laid out as [sin x | cos x | sin y | cos y] quarters.
pub fn sincos_pos_2d(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::config(format!("sincos dim {d} must be divisible by 4")));
    }
    let quarter = d / 4;
    let omega: Vec<f64> =
        (0..quarter).map(|i| 1.0 / 10_000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = vec![0.0f32; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            for (i, &om) in omega.iter().enumerate() {
                let xs = x as f64 * om;
                let ys = y as f64 * om;
                row[i] = xs.sin() as f32;
                row[quarter + i] = xs.cos() as f32;
                row[2 * quarter + i] = ys.sin() as f32;
                row[3 * quarter + i] = ys.cos() as f32;
            }
        }
    }
    Tensor::new(&[h * w, d], out)
}

impl ParamSet for Encoder {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.attn_block.visit(&format!("{prefix}.attn_block"), f);
        self.fuse_td16.visit(&format!("{prefix}.fuse_td16"), f);
        self.fuse_td8.visit(&format!("{prefix}.fuse_td8"), f);
        self.fuse_bu16.visit(&format!("{prefix}.fuse_bu16"), f);
        self.fuse_bu32.visit(&format!("{prefix}.fuse_bu32"), f);
        self.down8.visit(&format!("{prefix}.down8"), f);
        self.down16.visit(&format!("{prefix}.down16"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.attn_block.visit_mut(&format!("{prefix}.attn_block"), f);
        self.fuse_td16.visit_mut(&format!("{prefix}.fuse_td16"), f);
        self.fuse_td8.visit_mut(&format!("{prefix}.fuse_td8"), f);
        self.fuse_bu16.visit_mut(&format!("{prefix}.fuse_bu16"), f);
        self.fuse_bu32.visit_mut(&format!("{prefix}.fuse_bu32"), f);
        self.down8.visit_mut(&format!("{prefix}.down8"), f);
        self.down16.visit_mut(&format!("{prefix}.down16"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::count_weights;
    use rand::SeedableRng;

    fn cfg(dim: usize, ffn: usize) -> EncoderConfig {
        EncoderConfig { dim, ffn_dim: ffn, heads: 8, fuse_groups: 8 }
    }

    #[test]
    fn encoder_param_count_at_width_192() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut rng, &cfg(192, 512)).unwrap();
        assert_eq!(count_weights(&enc), 1_644_608);
    }

    #[test]
    fn forward_preserves_pyramid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new(&mut rng, &cfg(16, 32)).unwrap();
        let pyr = PyramidOutput {
            maps: [
                Tensor::full(&[16, 8, 12], 0.3),
                Tensor::full(&[16, 4, 6], 0.2),
                Tensor::full(&[16, 2, 3], 0.1),
            ],
        };
        let out = enc.forward(&pyr).unwrap();
        assert_eq!(out.maps[0].shape(), &[16, 8, 12]);
        assert_eq!(out.maps[1].shape(), &[16, 4, 6]);
        assert_eq!(out.maps[2].shape(), &[16, 2, 3]);
    }

    #[test]
    fn sincos_first_token_is_zero_one_pattern() {
        let pe = sincos_pos_2d(3, 3, 8).unwrap();
        // token (0,0): sin 0 = 0, cos 0 = 1 in both axes
        assert_eq!(pe.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sincos_values_match_direct_formula() {
        let d = 16;
        let pe = sincos_pos_2d(4, 5, d).unwrap();
        let quarter = d / 4;
        let (y, x) = (2usize, 3usize);
        let row = pe.row(y * 5 + x);
        for i in 0..quarter {
            let om = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
            assert!((row[i] as f64 - (x as f64 * om).sin()).abs() < 1e-6);
            assert!((row[3 * quarter + i] as f64 - (y as f64 * om).cos()).abs() < 1e-6);
        }
    }
}
