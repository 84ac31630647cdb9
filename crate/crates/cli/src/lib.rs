//! Library surface behind the `edgecrafter` binary: command implementations,
//! the finite-difference gradient suite, and the demo student used by the
//! distillation experiment. Integration tests drive these directly.

pub mod commands;
pub mod gradcheck;

use edgecrafter::backbone::{BackboneConfig, StemKind};

/// Student backbone for the adapter-distillation demo. The convergence
/// experiment trains only the adapter on top of frozen student features;
/// a shallow narrow student keeps those features well-conditioned enough
/// for the optimizer to drive the probe loss below 1e-3 within the demo's
/// epoch budget, and keeps a 5000-image run well under two CPU minutes.
pub fn demo_student_config() -> BackboneConfig {
    BackboneConfig {
        dim: 32,
        depth: 2,
        heads: 2,
        ffn_dim: 128,
        registers: 1,
        pos_grid: 40,
        stem: StemKind::Conv { dilation: 1 },
    }
}
