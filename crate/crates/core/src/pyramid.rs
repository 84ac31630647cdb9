//! Single-scale tokens to a three-scale feature pyramid.
//!
//! The backbone emits stride-16 tokens at every depth. This stage fuses the
//! last few block outputs (elementwise mean by default, channel concat as an
//! alternative), reshapes them to a spatial map, resizes that map to strides
//! 8, 16, and 32, and projects each scale to the pyramid width with its own
//! 1x1 (per-token linear) projection.

use crate::backbone::BackboneOutput;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamSet;
use crate::ops;
use crate::params::{ParamVisitor, ParamVisitorMut};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the selected block outputs are combined before projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Mean,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Backbone token width.
    pub in_dim: usize,
    /// Pyramid channel width (all three scales).
    pub out_dim: usize,
    /// How many trailing blocks to fuse.
    pub fuse_last: usize,
    pub fusion: Fusion,
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("pyramid dims must be positive"));
        }
        if self.fuse_last == 0 {
            return Err(Error::config("pyramid must fuse at least one block"));
        }
        Ok(())
    }

    /// Channel width entering the projections.
    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            Fusion::Mean => self.in_dim,
            Fusion::Concat => self.in_dim * self.fuse_last,
        }
    }
}

/// The three projected maps, finest first.
pub struct PyramidOutput {
    /// `[C, H/8, W/8]`, `[C, H/16, W/16]`, `[C, H/32, W/32]`.
    pub maps: [Tensor; 3],
}

pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

pub struct Pyramid {
    pub cfg: PyramidConfig,
    /// One projection per stride, ordered like [`PYRAMID_STRIDES`].
    projs: [Linear; 3],
}

impl Pyramid {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &PyramidConfig) -> Result<Self> {
        cfg.validate()?;
        let cin = cfg.fused_dim();
        let projs = [
            Linear::new(rng, cin, cfg.out_dim, true),
            Linear::new(rng, cin, cfg.out_dim, true),
            Linear::new(rng, cin, cfg.out_dim, true),
        ];
        Ok(Pyramid { cfg: cfg.clone(), projs })
    }

    pub fn forward(&self, bb: &BackboneOutput) -> Result<PyramidOutput> {
        let depth = bb.features.len();
        if self.cfg.fuse_last > depth {
            return Err(Error::config(format!(
                "pyramid fuses last {} blocks but backbone has {depth}",
                self.cfg.fuse_last
            )));
        }
        let (gh, gw) = bb.grid;
        if gh % 2 != 0 || gw % 2 != 0 {
            return Err(Error::input(format!(
                "stride-16 grid {gh}x{gw} must be even to reach stride 32"
            )));
        }
        let fused = self.fuse(bb)?;
        let map = tokens_to_map(&fused, gh, gw)?;

        let sizes = [(gh * 2, gw * 2), (gh, gw), (gh / 2, gw / 2)];
        let mut maps = Vec::with_capacity(3);
        for (i, (h, w)) in sizes.into_iter().enumerate() {
            let resized = ops::bilinear_resize(&map, h, w)?;
            let toks = map_to_tokens(&resized)?;
            let proj = self.projs[i].forward(&toks)?;
            maps.push(tokens_to_map(&proj, h, w)?);
        }
        let [a, b, c]: [Tensor; 3] = maps.try_into().expect("three scales");
        Ok(PyramidOutput { maps: [a, b, c] })
    }

    fn fuse(&self, bb: &BackboneOutput) -> Result<Tensor> {
        let depth = bb.features.len();
        let first = depth - self.cfg.fuse_last;
        match self.cfg.fusion {
            Fusion::Mean => {
                let mut acc = bb.patch_tokens(first)?;
                for i in first + 1..depth {
                    acc.add_assign(&bb.patch_tokens(i)?);
                }
                Ok(acc.scale(1.0 / self.cfg.fuse_last as f32))
            }
            Fusion::Concat => {
                let parts: Vec<Tensor> =
                    (first..depth).map(|i| bb.patch_tokens(i)).collect::<Result<_>>()?;
                let n = parts[0].shape()[0];
                let d = parts[0].shape()[1];
                let mut data = Vec::with_capacity(n * d * parts.len());
                for i in 0..n {
                    for p in &parts {
                        data.extend_from_slice(p.row(i));
                    }
                }
                Tensor::new(&[n, d * parts.len()], data)
            }
        }
    }
}

/// `[h*w, D]` row-major tokens -> `[D, h, w]` planes.
pub fn tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, d] = tokens.shape()[..] else {
        return Err(Error::shape(format!("tokens_to_map input: {:?}", tokens.shape())));
    };
    if n != h * w {
        return Err(Error::shape(format!("tokens_to_map: {n} tokens vs {h}x{w}")));
    }
    let src = tokens.data();
    let mut out = vec![0.0f32; d * h * w];
    for i in 0..n {
        for ch in 0..d {
            out[ch * n + i] = src[i * d + ch];
        }
    }
    Tensor::new(&[d, h, w], out)
}

/// `[D, h, w]` planes -> `[h*w, D]` row-major tokens.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    let [d, h, w] = map.shape()[..] else {
        return Err(Error::shape(format!("map_to_tokens input: {:?}", map.shape())));
    };
    let src = map.data();
    let n = h * w;
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        for ch in 0..d {
            out[i * d + ch] = src[ch * n + i];
        }
    }
    Tensor::new(&[n, d], out)
}

impl ParamSet for Pyramid {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        for (i, p) in self.projs.iter().enumerate() {
            p.visit(&format!("{prefix}.proj{}", PYRAMID_STRIDES[i]), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        for (i, p) in self.projs.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.proj{}", PYRAMID_STRIDES[i]), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::count_weights;
    use rand::SeedableRng;

    fn cfg(in_dim: usize, out_dim: usize, fusion: Fusion) -> PyramidConfig {
        PyramidConfig { in_dim, out_dim, fuse_last: 2, fusion }
    }

    fn fake_backbone(depth: usize, d: usize, gh: usize, gw: usize, fill: f32) -> BackboneOutput {
        BackboneOutput {
            features: (0..depth).map(|i| Tensor::full(&[1 + gh * gw, d], fill + i as f32)).collect(),
            grid: (gh, gw),
            registers: 1,
        }
    }

    #[test]
    fn projection_param_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pyramid::new(&mut rng, &cfg(192, 192, Fusion::Mean)).unwrap();
        assert_eq!(count_weights(&p), 111_168);
        let p = Pyramid::new(&mut rng, &cfg(256, 256, Fusion::Mean)).unwrap();
        assert_eq!(count_weights(&p), 197_376);
    }

    #[test]
    fn concat_fusion_has_more_params_than_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mean = Pyramid::new(&mut rng, &cfg(192, 192, Fusion::Mean)).unwrap();
        let cat = Pyramid::new(&mut rng, &cfg(192, 192, Fusion::Concat)).unwrap();
        assert!(count_weights(&cat) > count_weights(&mean));
    }

    #[test]
    fn scale_shapes_follow_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Pyramid::new(&mut rng, &cfg(16, 8, Fusion::Mean)).unwrap();
        let bb = fake_backbone(4, 16, 4, 6, 0.25);
        let out = p.forward(&bb).unwrap();
        assert_eq!(out.maps[0].shape(), &[8, 8, 12]);
        assert_eq!(out.maps[1].shape(), &[8, 4, 6]);
        assert_eq!(out.maps[2].shape(), &[8, 2, 3]);
    }

    #[test]
    fn mean_fusion_averages_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut config = cfg(4, 4, Fusion::Mean);
        config.fuse_last = 2;
        let p = Pyramid::new(&mut rng, &config).unwrap();
        // blocks fill 0,1,2,3 -> mean of last two = 2.5
        let bb = fake_backbone(4, 4, 2, 2, 0.0);
        let fused = p.fuse(&bb).unwrap();
        for &v in fused.data() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_grid_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Pyramid::new(&mut rng, &cfg(4, 4, Fusion::Mean)).unwrap();
        let bb = fake_backbone(4, 4, 3, 4, 0.0);
        assert!(p.forward(&bb).is_err());
    }

    #[test]
    fn token_map_roundtrip() {
        let t = Tensor::new(&[6, 3], (0..18).map(|v| v as f32).collect()).unwrap();
        let m = tokens_to_map(&t, 2, 3).unwrap();
        assert_eq!(map_to_tokens(&m).unwrap(), t);
    }
}
