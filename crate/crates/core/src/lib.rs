//! Framework-free reference implementation of a compact ViT family for
//! dense prediction: detection, human pose, and instance segmentation share
//! one backbone → pyramid → hybrid encoder trunk with task-specific
//! decoders, plus the full training-side machinery those models need —
//! Hungarian matching with a brute-force oracle, every task loss with
//! analytic gradients, feature-alignment distillation with LARS, and an
//! exact parameter/FLOP auditor. Everything is f32 CPU code with f64
//! accumulation, deterministic under a seed.

pub mod backbone;
pub mod budget;
pub mod decoder;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod registry;
pub mod synthetic;
pub mod tensor;

pub use backbone::{Backbone, BackboneConfig, BackboneOutput, StemKind};
pub use budget::{budget_report, count_params, estimate_macs, BudgetReport};
pub use decoder::{DecoderConfig, DetDecoder, MaskHead, PoseDecoder};
pub use distill::{
    distill_loss, fit_adapter_least_squares, lars_step, lr_at, run_distillation, DistillConfig,
    DistillRun, Teacher, TeacherKind,
};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput};
pub use error::{Error, Result};
pub use losses::{
    total_det_loss, total_insseg_loss, total_pose_loss, GroundTruthSet, LossReport, LossWeights,
    PredictionSet, Task,
};
pub use matching::{brute_force_match, build_cost_matrix, hungarian, CostMatrix, MatchAssignment};
pub use model::{Model, ModelConfig, ModelOutput, TaskPrediction};
pub use params::{count_weights, manifest_entries, ParamKind, ParamSet};
pub use pyramid::{Fusion, Pyramid, PyramidConfig, PyramidOutput, PYRAMID_STRIDES};
pub use registry::{all_entries, registry_entry, RegistryEntry, Variant};
pub use synthetic::{random_ground_truth, random_predictions, SceneConfig};
pub use tensor::Tensor;

/// Machine-readable report schema version stamped into every CLI JSON
/// document.
pub const SPEC_VERSION: &str = "1.0.0";
