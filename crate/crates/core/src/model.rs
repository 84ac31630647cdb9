//! End-to-end assembly: backbone → pyramid → hybrid encoder → task head.

use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{
    DecoderConfig, DetDecoder, DetDecoderOutput, MaskHead, PoseDecoder, PoseDecoderOutput,
};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::losses::{PredictionSet, Task};
use crate::params::{ParamSet, ParamVisitor, ParamVisitorMut};
use crate::pyramid::{Pyramid, PyramidConfig, PyramidOutput};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Keypoints per instance; 0 unless the task is pose.
    pub num_keypoints: usize,
    pub backbone: BackboneConfig,
    pub pyramid: PyramidConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pyramid.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.pyramid.in_dim != self.backbone.dim {
            return Err(Error::config(format!(
                "pyramid expects width {}, backbone produces {}",
                self.pyramid.in_dim, self.backbone.dim
            )));
        }
        if self.encoder.dim != self.pyramid.out_dim {
            return Err(Error::config(format!(
                "encoder width {} must match pyramid output {}",
                self.encoder.dim, self.pyramid.out_dim
            )));
        }
        if self.decoder.dim != self.encoder.dim {
            return Err(Error::config(format!(
                "decoder width {} must match encoder width {}",
                self.decoder.dim, self.encoder.dim
            )));
        }
        if self.decoder.levels != crate::pyramid::PYRAMID_STRIDES.len() {
            return Err(Error::config(format!(
                "decoder samples {} levels, pyramid provides {}",
                self.decoder.levels,
                crate::pyramid::PYRAMID_STRIDES.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        match self.task {
            Task::Pose => {
                if self.num_keypoints == 0 {
                    return Err(Error::config("pose needs num_keypoints > 0"));
                }
                if self.num_classes != 1 {
                    return Err(Error::config("pose is single-class (person)"));
                }
            }
            Task::Detect | Task::InstanceSegment => {
                if self.num_keypoints != 0 {
                    return Err(Error::config(format!(
                        "{:?} does not use keypoints",
                        self.task
                    )));
                }
            }
        }
        Ok(())
    }
}

enum TaskHead {
    Det(DetDecoder),
    Pose(PoseDecoder),
    InsSeg { det: DetDecoder, mask: MaskHead },
}

pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub encoder: Encoder,
    head: TaskHead,
}

/// Everything one forward pass produces, stage by stage.
pub struct ModelOutput {
    /// Backbone patch grid (h, w) at stride 16.
    pub grid: (usize, usize),
    pub pyramid: PyramidOutput,
    pub encoder: EncoderOutput,
    pub prediction: TaskPrediction,
}

pub enum TaskPrediction {
    Det(DetDecoderOutput),
    Pose(PoseDecoderOutput),
    /// Detection output plus one stride-4 mask stack `[N, H/4, W/4]` per
    /// decoder layer.
    InsSeg { det: DetDecoderOutput, masks: Vec<Tensor> },
}

impl Model {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(rng, &cfg.backbone)?;
        let pyramid = Pyramid::new(rng, &cfg.pyramid)?;
        let encoder = Encoder::new(rng, &cfg.encoder)?;
        let head = match cfg.task {
            Task::Detect => TaskHead::Det(DetDecoder::new(rng, &cfg.decoder, cfg.num_classes)?),
            Task::Pose => TaskHead::Pose(PoseDecoder::new(rng, &cfg.decoder, cfg.num_keypoints)?),
            Task::InstanceSegment => TaskHead::InsSeg {
                det: DetDecoder::new(rng, &cfg.decoder, cfg.num_classes)?,
                mask: MaskHead::new(rng, cfg.decoder.dim)?,
            },
        };
        Ok(Model { cfg: cfg.clone(), backbone, pyramid, encoder, head })
    }

    /// Runs `[3, H, W]` (H, W divisible by 32) through every stage.
    pub fn forward(&self, img: &Tensor) -> Result<ModelOutput> {
        let bb = self.backbone.forward(img)?;
        let pyr = self.pyramid.forward(&bb)?;
        let enc = self.encoder.forward(&pyr)?;
        let prediction = match &self.head {
            TaskHead::Det(d) => TaskPrediction::Det(d.forward(&enc.maps)?),
            TaskHead::Pose(p) => TaskPrediction::Pose(p.forward(&enc.maps)?),
            TaskHead::InsSeg { det, mask } => {
                let out = det.forward(&enc.maps)?;
                let pixel = mask.pixel_embeddings(&enc.maps[0])?;
                let masks = out
                    .tokens
                    .iter()
                    .map(|t| mask.masks(&pixel, t))
                    .collect::<Result<Vec<_>>>()?;
                TaskPrediction::InsSeg { det: out, masks }
            }
        };
        Ok(ModelOutput { grid: bb.grid, pyramid: pyr, encoder: enc, prediction })
    }
}

impl TaskPrediction {
    /// Layer-by-layer predictions in the loss/matching format; the last
    /// entry is the final prediction.
    pub fn per_layer_sets(&self) -> Vec<PredictionSet> {
        match self {
            TaskPrediction::Det(out) => out
                .layers
                .iter()
                .map(|l| PredictionSet {
                    logits: l.logits.clone(),
                    boxes: l.boxes.clone(),
                    keypoints: None,
                    kpt_logits: None,
                    masks: None,
                })
                .collect(),
            TaskPrediction::Pose(out) => out
                .layers
                .iter()
                .map(|l| PredictionSet {
                    logits: l.logits.clone(),
                    boxes: l.boxes.clone(),
                    keypoints: Some(l.keypoints.clone()),
                    kpt_logits: Some(l.kpt_logits.clone()),
                    masks: None,
                })
                .collect(),
            TaskPrediction::InsSeg { det, masks } => det
                .layers
                .iter()
                .zip(masks)
                .map(|(l, m)| PredictionSet {
                    logits: l.logits.clone(),
                    boxes: l.boxes.clone(),
                    keypoints: None,
                    kpt_logits: None,
                    masks: Some(m.clone()),
                })
                .collect(),
        }
    }
}

impl ParamSet for Model {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.backbone.visit(&format!("{prefix}.backbone"), f);
        self.pyramid.visit(&format!("{prefix}.pyramid"), f);
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        match &self.head {
            TaskHead::Det(d) => d.visit(&format!("{prefix}.decoder"), f),
            TaskHead::Pose(p) => p.visit(&format!("{prefix}.decoder"), f),
            TaskHead::InsSeg { det, mask } => {
                det.visit(&format!("{prefix}.decoder"), f);
                mask.visit(&format!("{prefix}.mask_head"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.backbone.visit_mut(&format!("{prefix}.backbone"), f);
        self.pyramid.visit_mut(&format!("{prefix}.pyramid"), f);
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        match &mut self.head {
            TaskHead::Det(d) => d.visit_mut(&format!("{prefix}.decoder"), f),
            TaskHead::Pose(p) => p.visit_mut(&format!("{prefix}.decoder"), f),
            TaskHead::InsSeg { det, mask } => {
                det.visit_mut(&format!("{prefix}.decoder"), f);
                mask.visit_mut(&format!("{prefix}.mask_head"), f);
            }
        }
    }
}
