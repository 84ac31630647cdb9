//! Parameter counting and closed-form MAC/FLOP estimation.
//!
//! Parameters are counted by walking the constructed model's manifest, so
//! the totals are exact by construction. MACs are computed in closed form
//! from the configuration: conv = C_out·H'·W'·(C_in/groups)·k², linear =
//! tokens·D_in·D_out, attention = 4nD² + 2n²D; elementwise ops,
//! normalizations, softmax, and interpolation count 0. Both 1-FLOP-per-MAC
//! and 2-FLOPs-per-MAC totals are reported since profiler conventions
//! differ. The estimate covers the deployment forward pass: per-layer
//! detection heads run every layer, while the segmentation mask product is
//! produced once from the final decoder layer.

use crate::error::{Error, Result};
use crate::losses::Task;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamKind, ParamSet};
use crate::pyramid::Fusion;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetReport {
    pub params_total: u64,
    pub params_by_module: BTreeMap<String, u64>,
    pub macs_total: u64,
    pub macs_by_module: BTreeMap<String, u64>,
    /// Total at 1 FLOP per multiply-accumulate (== MACs).
    pub flops_1x: u64,
    /// Total at 2 FLOPs per multiply-accumulate.
    pub flops_2x: u64,
    pub input_size: (usize, usize),
}

/// Exact learnable-scalar counts, itemized by top-level module.
pub fn count_params(model: &Model) -> (u64, BTreeMap<String, u64>) {
    let mut by_module: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    model.visit("m", &mut |name, kind, t| {
        if kind != ParamKind::Weight {
            return;
        }
        let module = name.split('.').nth(1).unwrap_or("?").to_string();
        *by_module.entry(module).or_insert(0) += t.numel() as u64;
        total += t.numel() as u64;
    });
    (total, by_module)
}

fn conv_macs(cout: u64, cin: u64, k: u64, oh: u64, ow: u64, groups: u64) -> u64 {
    cout * oh * ow * (cin / groups) * k * k
}

fn mhsa_macs(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

fn block_macs(n: u64, d: u64, ffn: u64) -> u64 {
    mhsa_macs(n, d) + 2 * n * d * ffn
}

struct Dims {
    h: u64,
    w: u64,
}

impl Dims {
    fn at(&self, stride: u64) -> (u64, u64) {
        (self.h / stride, self.w / stride)
    }

    fn tokens(&self, stride: u64) -> u64 {
        let (h, w) = self.at(stride);
        h * w
    }
}

fn backbone_macs(cfg: &ModelConfig, dm: &Dims) -> u64 {
    let d = cfg.backbone.dim as u64;
    let stem = match cfg.backbone.stem {
        crate::backbone::StemKind::Conv { .. } => {
            // Each 3×3 stride-2 conv halves the resolution first; dilation
            // changes padding, not output size or MACs.
            let chans = [(d / 8, 3), (d / 4, d / 8), (d / 2, d / 4), (d, d / 2)];
            let (mut h, mut w) = (dm.h, dm.w);
            let mut acc = 0u64;
            for (cout, cin) in chans {
                h /= 2;
                w /= 2;
                acc += conv_macs(cout, cin, 3, h, w, 1);
            }
            acc
        }
        crate::backbone::StemKind::Patch16 => {
            let (h, w) = dm.at(16);
            conv_macs(d, 3, 16, h, w, 1)
        }
    };
    let n = dm.tokens(16) + cfg.backbone.registers as u64;
    stem + cfg.backbone.depth as u64 * block_macs(n, d, cfg.backbone.ffn_dim as u64)
}

fn pyramid_tokens(dm: &Dims) -> u64 {
    dm.tokens(8) + dm.tokens(16) + dm.tokens(32)
}

fn pyramid_macs(cfg: &ModelConfig, dm: &Dims) -> u64 {
    let cin = match cfg.pyramid.fusion {
        Fusion::Mean => cfg.pyramid.in_dim as u64,
        Fusion::Concat => (cfg.pyramid.in_dim * cfg.pyramid.fuse_last) as u64,
    };
    pyramid_tokens(dm) * cin * cfg.pyramid.out_dim as u64
}

fn encoder_macs(cfg: &ModelConfig, dm: &Dims) -> u64 {
    let c = cfg.encoder.dim as u64;
    let g = cfg.encoder.fuse_groups as u64;
    let fuse = |(oh, ow): (u64, u64)| {
        conv_macs(c, 2 * c, 1, oh, ow, 1) + 2 * conv_macs(c, c, 3, oh, ow, g)
    };
    let attn = block_macs(dm.tokens(32), c, cfg.encoder.ffn_dim as u64);
    // Top-down s16 and s8 fusions, then two stride-2 downsample convs and
    // the bottom-up s16/s32 fusions.
    attn + fuse(dm.at(16))
        + fuse(dm.at(8))
        + conv_macs(c, c, 3, dm.at(16).0, dm.at(16).1, 1)
        + fuse(dm.at(16))
        + conv_macs(c, c, 3, dm.at(32).0, dm.at(32).1, 1)
        + fuse(dm.at(32))
}

fn deform_macs(cfg: &ModelConfig, t: u64, dm: &Dims) -> u64 {
    let c = cfg.decoder.dim as u64;
    let (h, l, p) =
        (cfg.decoder.heads as u64, cfg.decoder.levels as u64, cfg.decoder.points as u64);
    t * c * (h * l * p * 2)            // sampling offsets
        + t * c * (h * l * p)          // attention weights
        + pyramid_tokens(dm) * c * c   // shared value projection
        + t * l * p * c                // weighted accumulation
        + t * c * c                    // output projection
}

fn decoder_macs(cfg: &ModelConfig, dm: &Dims) -> u64 {
    let c = cfg.decoder.dim as u64;
    let f = cfg.decoder.ffn_dim as u64;
    let n = cfg.decoder.num_queries as u64;
    let layers = cfg.decoder.num_layers as u64;
    let ncls = cfg.num_classes as u64;
    let box_head = n * (2 * c * c + 4 * c);
    match cfg.task {
        Task::Detect | Task::InstanceSegment => {
            let per = 4 * n * c * c + 2 * n * n * c + deform_macs(cfg, n, dm) + 2 * n * c * f;
            let heads = layers * (n * c * ncls + box_head);
            layers * per + heads
        }
        Task::Pose => {
            let k = cfg.num_keypoints as u64;
            let t = n * (k + 1);
            // Union self-attention: each token attends to its own person's
            // k+1 parts plus the same part across the other persons.
            let keys = (k + 1) + n - 1;
            let per = 4 * t * c * c + 2 * t * keys * c + deform_macs(cfg, t, dm) + 2 * t * c * f;
            let heads = layers * (n * c + box_head + (t - n) * c * 2 + (t - n) * c);
            layers * per + heads
        }
    }
}

fn mask_head_macs(cfg: &ModelConfig, dm: &Dims) -> u64 {
    let c = cfg.decoder.dim as u64;
    let e = c / 2;
    let n = cfg.decoder.num_queries as u64;
    let (h4, w4) = dm.at(4);
    let s4 = h4 * w4;
    conv_macs(c, c, 3, h4, w4, c)     // depthwise conv on the upsampled map
        + s4 * (c * c + c * e)        // pixel embedding MLP
        + n * (c * c + c * e)         // query embedding MLP (final layer)
        + n * s4 * e                  // mask dot product
}

/// Closed-form MAC estimate per module at the given input size (both sides
/// divisible by 32).
pub fn estimate_macs(
    cfg: &ModelConfig,
    input_size: (usize, usize),
) -> Result<BTreeMap<String, u64>> {
    cfg.validate()?;
    let (h, w) = input_size;
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::input(format!(
            "input {h}×{w} must be positive and divisible by 32"
        )));
    }
    let dm = Dims { h: h as u64, w: w as u64 };
    let mut by_module = BTreeMap::new();
    by_module.insert("backbone".to_string(), backbone_macs(cfg, &dm));
    by_module.insert("pyramid".to_string(), pyramid_macs(cfg, &dm));
    by_module.insert("encoder".to_string(), encoder_macs(cfg, &dm));
    by_module.insert("decoder".to_string(), decoder_macs(cfg, &dm));
    if cfg.task == Task::InstanceSegment {
        by_module.insert("mask_head".to_string(), mask_head_macs(cfg, &dm));
    }
    Ok(by_module)
}

/// Full audit of a constructed model: exact parameters plus estimated MACs
/// and both FLOP conventions.
pub fn budget_report(model: &Model, input_size: (usize, usize)) -> Result<BudgetReport> {
    let (params_total, params_by_module) = count_params(model);
    let macs_by_module = estimate_macs(&model.cfg, input_size)?;
    let macs_total: u64 = macs_by_module.values().sum();
    Ok(BudgetReport {
        params_total,
        params_by_module,
        macs_total,
        macs_by_module,
        flops_1x: macs_total,
        flops_2x: 2 * macs_total,
        input_size,
    })
}

impl BudgetReport {
    /// Aligned plain-text table, one row per module plus a total row.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, String, String)> = Vec::new();
        let mut modules: Vec<&String> = self.params_by_module.keys().collect();
        for m in self.macs_by_module.keys() {
            if !self.params_by_module.contains_key(m) {
                modules.push(m);
            }
        }
        for m in modules {
            rows.push((
                m.clone(),
                self.params_by_module.get(m).map_or("-".into(), |v| v.to_string()),
                self.macs_by_module.get(m).map_or("-".into(), |v| v.to_string()),
            ));
        }
        rows.push((
            "total".to_string(),
            self.params_total.to_string(),
            self.macs_total.to_string(),
        ));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max("module".len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(6).max("params".len());
        let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(4).max("macs".len());
        let mut out = format!(
            "{:<w0$}  {:>w1$}  {:>w2$}\n",
            "module", "params", "macs",
            w0 = w0, w1 = w1, w2 = w2
        );
        for (m, p, f) in rows {
            out.push_str(&format!(
                "{:<w0$}  {:>w1$}  {:>w2$}\n",
                m, p, f,
                w0 = w0, w1 = w1, w2 = w2
            ));
        }
        out.push_str(&format!(
            "flops(1 FLOP/MAC) {}  flops(2 FLOPs/MAC) {}  input {}x{}\n",
            self.flops_1x, self.flops_2x, self.input_size.0, self.input_size.1
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{registry_entry, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s_model(task: Task) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Model::new(&mut rng, &registry_entry(Variant::S, task).model).unwrap()
    }

    #[test]
    fn detection_s_params_per_module_are_frozen() {
        let (total, by) = count_params(&s_model(Task::Detect));
        assert_eq!(by["backbone"], 5_865_408);
        assert_eq!(by["pyramid"], 111_168);
        assert_eq!(by["encoder"], 1_644_608);
        assert_eq!(by["decoder"], 2_325_632);
        assert_eq!(total, 9_946_816);
    }

    #[test]
    fn pose_and_segmentation_s_params_are_frozen() {
        let (pose_total, pose_by) = count_params(&s_model(Task::Pose));
        assert_eq!(pose_by["decoder"], 2_270_450);
        assert_eq!(pose_total, 9_891_634);
        let (seg_total, seg_by) = count_params(&s_model(Task::InstanceSegment));
        assert_eq!(seg_by["mask_head"], 113_472);
        assert_eq!(seg_total, 10_060_288);
    }

    #[test]
    fn detection_s_macs_at_640_are_frozen() {
        let cfg = registry_entry(Variant::S, Task::Detect).model;
        let by = estimate_macs(&cfg, (640, 640)).unwrap();
        assert_eq!(by["backbone"], 21_172_621_824);
        assert_eq!(by["pyramid"], 309_657_600);
        assert_eq!(by["encoder"], 2_429_337_600);
        assert_eq!(by["decoder"], 2_010_931_200);
        assert_eq!(by.values().sum::<u64>(), 25_922_548_224);
    }

    #[test]
    fn pose_and_segmentation_s_macs_are_frozen() {
        let pose = registry_entry(Variant::S, Task::Pose).model;
        let by = estimate_macs(&pose, (640, 640)).unwrap();
        assert_eq!(by["decoder"], 13_441_536_000);
        assert_eq!(by.values().sum::<u64>(), 37_353_153_024);
        let seg = registry_entry(Variant::S, Task::InstanceSegment).model;
        let by = estimate_macs(&seg, (640, 640)).unwrap();
        assert_eq!(by["decoder"] + by["mask_head"], 4_224_614_400);
        assert_eq!(by.values().sum::<u64>(), 28_136_231_424);
    }

    #[test]
    fn halving_the_input_scales_as_expected() {
        let cfg = registry_entry(Variant::S, Task::Detect).model;
        let by = estimate_macs(&cfg, (320, 320)).unwrap();
        assert_eq!(by.values().sum::<u64>(), 4_840_487_424);
        // Pure-conv modules scale exactly 4×.
        let full = estimate_macs(&cfg, (640, 640)).unwrap();
        assert_eq!(full["pyramid"], 4 * by["pyramid"]);
    }

    #[test]
    fn single_one_by_one_conv_example() {
        assert_eq!(conv_macs(256, 256, 1, 40, 40, 1), 104_857_600);
    }

    #[test]
    fn report_is_additive_and_flops_consistent() {
        let model = s_model(Task::InstanceSegment);
        let r = budget_report(&model, (640, 640)).unwrap();
        assert_eq!(r.macs_total, r.macs_by_module.values().sum::<u64>());
        assert_eq!(r.params_total, r.params_by_module.values().sum::<u64>());
        assert_eq!(r.flops_2x, 2 * r.flops_1x);
        assert_eq!(r.flops_1x, r.macs_total);
        let table = r.render_table();
        assert!(table.contains("mask_head"));
        assert!(table.contains(&r.params_total.to_string()));
    }

    #[test]
    fn stem_dilation_changes_nothing_in_the_budget() {
        let mut cfg = registry_entry(Variant::M, Task::Detect).model;
        let base = estimate_macs(&cfg, (640, 640)).unwrap();
        for d in [2, 3] {
            cfg.backbone.stem = crate::backbone::StemKind::Conv { dilation: d };
            assert_eq!(estimate_macs(&cfg, (640, 640)).unwrap(), base);
        }
    }

    #[test]
    fn unaligned_input_is_rejected()  {
        let cfg = registry_entry(Variant::S, Task::Detect).model;
        assert!(estimate_macs(&cfg, (630, 640)).is_err());
        assert!(estimate_macs(&cfg, (0, 0)).is_err());
    }
}
