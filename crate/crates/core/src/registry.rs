//! Built-in model registry: the four family scales (S/M/L/X) × three tasks,
//! each with its structural configuration, loss weights, distillation
//! protocol defaults, published budget targets, and the (inert) training
//! recipe metadata carried for reference only.

use crate::backbone::{BackboneConfig, StemKind};
use crate::decoder::DecoderConfig;
use crate::distill::{DistillConfig, TeacherKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Task};
use crate::model::ModelConfig;
use crate::pyramid::{Fusion, PyramidConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const NUM_COCO_CLASSES: usize = 80;
pub const NUM_COCO_KEYPOINTS: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    S,
    M,
    L,
    X,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::S, Variant::M, Variant::L, Variant::X]
    }

    fn index(&self) -> usize {
        match self {
            Variant::S => 0,
            Variant::M => 1,
            Variant::L => 2,
            Variant::X => 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::S => "S",
            Variant::M => "M",
            Variant::L => "L",
            Variant::X => "X",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Variant::S),
            "M" => Ok(Variant::M),
            "L" => Ok(Variant::L),
            "X" => Ok(Variant::X),
            other => Err(Error::input(format!(
                "unknown model variant '{other}'; valid options: S, M, L, X"
            ))),
        }
    }
}

/// Published parameter/GFLOP targets the budget auditor compares against.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BudgetTargets {
    pub params_millions: f64,
    pub gflops_at_640: f64,
}

/// Training recipe fields recorded for reference; nothing in this crate
/// consumes them (full-dataset training is out of scope).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub optimizer: String,
    pub base_lr: f64,
    pub backbone_lr: f64,
    pub lr_decay: Option<f64>,
    pub weight_decay: f64,
    pub epochs_augmented: u32,
    pub epochs_finetune: u32,
    pub total_batch_size: u32,
    pub prob_mosaic: f64,
    pub epochs_mosaic: u32,
    pub prob_mixup: f64,
    pub epochs_mixup: u32,
    pub prob_copypaste: Option<f64>,
    pub epochs_copypaste: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub variant: Variant,
    pub task: Task,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub distill: DistillConfig,
    pub targets: BudgetTargets,
    pub training: TrainingMetadata,
}

/// Structural scale table: (backbone dim, heads, ffn ratio,
/// encoder dim, encoder ffn, decoder ffn).
const SCALES: [(usize, usize, usize, usize, usize, usize); 4] = [
    (192, 3, 4, 192, 512, 512),
    (256, 4, 4, 256, 512, 1024),
    (384, 6, 4, 256, 1024, 1024),
    (384, 6, 6, 256, 2048, 2048),
];

const DET_TARGETS: [(f64, f64); 4] = [(10.0, 26.0), (18.0, 53.0), (31.0, 101.0), (49.0, 151.0)];
const POSE_TARGETS: [(f64, f64); 4] = [(9.9, 30.4), (19.8, 62.8), (34.3, 111.7), (50.6, 172.2)];
const SEG_TARGETS: [(f64, f64); 4] = [(10.3, 33.1), (20.1, 64.2), (33.6, 110.8), (49.9, 168.1)];

pub fn registry_entry(variant: Variant, task: Task) -> RegistryEntry {
    let i = variant.index();
    let (dim, heads, ratio, enc_dim, enc_ffn, dec_ffn) = SCALES[i];
    let model = ModelConfig {
        task,
        num_classes: if task == Task::Pose { 1 } else { NUM_COCO_CLASSES },
        num_keypoints: if task == Task::Pose { NUM_COCO_KEYPOINTS } else { 0 },
        backbone: BackboneConfig {
            dim,
            depth: 12,
            heads,
            ffn_dim: dim * ratio,
            registers: 1,
            pos_grid: 40,
            stem: StemKind::Conv { dilation: 1 },
        },
        pyramid: PyramidConfig {
            in_dim: dim,
            out_dim: enc_dim,
            fuse_last: 2,
            fusion: Fusion::Mean,
        },
        encoder: EncoderConfig { dim: enc_dim, ffn_dim: enc_ffn, heads: 8, fuse_groups: 8 },
        decoder: DecoderConfig {
            dim: enc_dim,
            ffn_dim: dec_ffn,
            num_layers: 4,
            num_queries: 300,
            heads: 8,
            levels: 3,
            points: 4,
        },
    };

    let loss = match task {
        Task::Detect => LossWeights::detect_default(),
        Task::Pose => LossWeights::pose_default(),
        Task::InstanceSegment => LossWeights::insseg_default(),
    };

    // The smallest backbone distills from the small reference teacher; the
    // wider ones from the base teacher, at the higher base rate.
    let (teacher, base_lr) = match variant {
        Variant::S => (TeacherKind::MockS, 4.0),
        Variant::M => (TeacherKind::MockB, 4.0),
        Variant::L | Variant::X => (TeacherKind::MockB, 9.0),
    };
    let distill = DistillConfig::protocol(teacher, base_lr);

    let (params_millions, gflops_at_640) = match task {
        Task::Detect => DET_TARGETS[i],
        Task::Pose => POSE_TARGETS[i],
        Task::InstanceSegment => SEG_TARGETS[i],
    };

    let training = match task {
        Task::Detect | Task::InstanceSegment => TrainingMetadata {
            optimizer: "AdamW".to_string(),
            base_lr: 5e-4,
            backbone_lr: [2.5e-5, 2.5e-5, 5e-6, 2.5e-6][i],
            lr_decay: Some(0.5),
            weight_decay: [1e-4, 1e-4, 1.25e-4, 1.25e-4][i],
            epochs_augmented: [72, 60, 48, 48][i],
            epochs_finetune: 2,
            total_batch_size: 32,
            prob_mosaic: [0.75, 0.75, 1.0, 1.0][i],
            epochs_mosaic: [36, 30, 24, 24][i],
            prob_mixup: [0.75, 0.75, 1.0, 1.0][i],
            epochs_mixup: [36, 30, 24, 24][i],
            prob_copypaste: None,
            epochs_copypaste: None,
        },
        Task::Pose => TrainingMetadata {
            optimizer: "AdamW".to_string(),
            base_lr: 5e-4,
            backbone_lr: [2.5e-5, 2.5e-5, 2.5e-6, 2.5e-6][i],
            lr_decay: None,
            weight_decay: [1e-4, 1e-4, 1.25e-4, 1.25e-4][i],
            epochs_augmented: [90, 90, 72, 72][i],
            epochs_finetune: 2,
            total_batch_size: 64,
            prob_mosaic: 0.5,
            epochs_mosaic: [45, 45, 48, 48][i],
            prob_mixup: 0.5,
            epochs_mixup: [45, 45, 48, 48][i],
            prob_copypaste: Some(0.5),
            epochs_copypaste: Some([45, 45, 48, 48][i]),
        },
    };

    RegistryEntry { variant, task, model, loss, distill, targets: BudgetTargets { params_millions, gflops_at_640 }, training }
}

pub fn all_entries() -> Vec<RegistryEntry> {
    let mut out = Vec::with_capacity(12);
    for v in Variant::all() {
        for t in [Task::Detect, Task::Pose, Task::InstanceSegment] {
            out.push(registry_entry(v, t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_entry_validates() {
        for e in all_entries() {
            e.model.validate().unwrap();
            e.loss.validate().unwrap();
            e.distill.validate().unwrap();
        }
    }

    #[test]
    fn scale_table_matches_the_family() {
        let s = registry_entry(Variant::S, Task::Detect);
        assert_eq!(s.model.backbone.dim, 192);
        assert_eq!(s.model.backbone.heads, 3);
        assert_eq!(s.model.backbone.ffn_dim, 768);
        assert_eq!(s.model.encoder.dim, 192);
        assert_eq!(s.model.decoder.ffn_dim, 512);
        assert_eq!(s.model.decoder.num_queries, 300);
        assert_eq!(s.model.decoder.num_layers, 4);

        let x = registry_entry(Variant::X, Task::Detect);
        assert_eq!(x.model.backbone.dim, 384);
        assert_eq!(x.model.backbone.ffn_dim, 384 * 6);
        assert_eq!(x.model.encoder.ffn_dim, 2048);
        assert_eq!(x.model.decoder.ffn_dim, 2048);
    }

    #[test]
    fn teacher_pairing_and_rates() {
        assert_eq!(registry_entry(Variant::S, Task::Detect).distill.teacher, TeacherKind::MockS);
        for v in [Variant::M, Variant::L, Variant::X] {
            assert_eq!(registry_entry(v, Task::Detect).distill.teacher, TeacherKind::MockB);
        }
        assert_eq!(registry_entry(Variant::M, Task::Detect).distill.base_lr, 4.0);
        assert_eq!(registry_entry(Variant::L, Task::Detect).distill.base_lr, 9.0);
    }

    #[test]
    fn loss_weights_follow_the_task() {
        let det = registry_entry(Variant::S, Task::Detect).loss;
        assert_eq!((det.lambda_cls, det.lambda_l1, det.lambda_giou), (1.0, 5.0, 2.0));
        assert_eq!((det.lambda_ddf, det.lambda_fgl), (1.5, 0.15));
        let pose = registry_entry(Variant::S, Task::Pose).loss;
        assert_eq!((pose.lambda_cls, pose.lambda_kpt, pose.lambda_oks), (2.0, 10.0, 4.0));
        let seg = registry_entry(Variant::S, Task::InstanceSegment).loss;
        assert_eq!((seg.lambda_cls, seg.lambda_l1, seg.lambda_giou), (2.0, 1.0, 1.0));
        assert_eq!((seg.lambda_mask, seg.lambda_dice), (5.0, 5.0));
    }

    #[test]
    fn variant_parsing_is_case_insensitive_and_strict() {
        assert_eq!("s".parse::<Variant>().unwrap(), Variant::S);
        assert_eq!("X".parse::<Variant>().unwrap(), Variant::X);
        let err = "Q".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("S, M, L, X"), "{err}");
    }

    #[test]
    fn entry_roundtrips_through_json() {
        let e = registry_entry(Variant::M, Task::Pose);
        let json = serde_json::to_string(&e).unwrap();
        let back: RegistryEntry = serde_json::from_str(&json).unwrap();
        assert_eq!(back.model.backbone.dim, e.model.backbone.dim);
        assert_eq!(back.task, Task::Pose);
        assert_eq!(back.training.prob_copypaste, Some(0.5));
    }
}
