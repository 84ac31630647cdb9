//! Implementations behind each CLI verb. Every command returns a JSON value
//! for stdout plus a pass/fail verdict; human-readable diagnostics go to
//! stderr so stdout stays machine-parseable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use edgecrafter::budget::budget_report;
use edgecrafter::distill::{
    run_distillation, synthetic_images, DistillConfig, Teacher, TeacherKind,
};
use edgecrafter::losses::{
    total_det_loss, total_insseg_loss, total_pose_loss, LossWeights, Task,
};
use edgecrafter::matching::{brute_force_match, build_cost_matrix, hungarian};
use edgecrafter::model::{Model, TaskPrediction};
use edgecrafter::params::{manifest_entries, ParamKind};
use edgecrafter::registry::{registry_entry, RegistryEntry, Variant};
use edgecrafter::synthetic::{random_ground_truth, random_predictions, SceneConfig};
use edgecrafter::tensor::Tensor;
use edgecrafter::SPEC_VERSION;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::gradcheck;

/// Command failure split by exit-code class: bad invocations exit 2, checks
/// that ran and failed (or could not run) exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

impl From<edgecrafter::error::Error> for CliError {
    fn from(e: edgecrafter::error::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub type CmdResult = Result<(Value, bool), CliError>;

pub fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::from_str(s).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn parse_task(s: &str) -> Result<Task, CliError> {
    Task::from_str(s).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn parse_teacher(s: &str) -> Result<TeacherKind, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "linear-probe" => Ok(TeacherKind::LinearProbe),
        "mock-s" => Ok(TeacherKind::MockS),
        "mock-b" => Ok(TeacherKind::MockB),
        other => Err(CliError::Usage(format!(
            "unknown teacher '{other}'; valid options: linear-probe, mock-s, mock-b"
        ))),
    }
}

/// Registry entry, either built in or loaded from a JSON config file.
pub fn resolve_entry(
    variant: Variant,
    task: Task,
    config: Option<&Path>,
) -> Result<RegistryEntry, CliError> {
    match config {
        None => Ok(registry_entry(variant, task)),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let entry: RegistryEntry = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
            Ok(entry)
        }
    }
}

fn check_input_size(input: usize) -> Result<(), CliError> {
    if input == 0 || input % 32 != 0 {
        return Err(CliError::Usage(format!(
            "--input {input} is not a positive multiple of 32"
        )));
    }
    Ok(())
}

/// FNV-1a over shape and little-endian f32 payload of each tensor in order.
fn checksum(tensors: &[&Tensor]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x100000001b3);
    };
    for t in tensors {
        for &d in t.shape() {
            for b in (d as u64).to_le_bytes() {
                eat(b);
            }
        }
        for &v in t.data() {
            for b in v.to_le_bytes() {
                eat(b);
            }
        }
    }
    format!("{h:016x}")
}

fn shape_json(t: &Tensor) -> Value {
    Value::Array(t.shape().iter().map(|&d| Value::from(d as u64)).collect())
}

/// Builds the model described by the entry and echoes its full parameter
/// manifest.
pub fn cmd_build(
    variant: Variant,
    task: Task,
    register_count: Option<usize>,
    seed: u64,
    config: Option<&Path>,
) -> CmdResult {
    let mut entry = resolve_entry(variant, task, config)?;
    if let Some(r) = register_count {
        entry.model.backbone.registers = r;
    }
    entry.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(&mut rng, &entry.model)?;

    let rows = manifest_entries(&model);
    let params_total: u64 = rows
        .iter()
        .filter(|(_, kind, _, _)| *kind == ParamKind::Weight)
        .map(|(_, _, _, n)| *n as u64)
        .sum();
    let manifest: Vec<Value> = rows
        .iter()
        .map(|(name, kind, shape, numel)| {
            json!({
                "name": name,
                "kind": match kind { ParamKind::Weight => "weight", ParamKind::Buffer => "buffer" },
                "shape": shape,
                "count": numel,
            })
        })
        .collect();

    eprintln!(
        "built {variant} {task}: {params_total} parameters in {} tensors",
        manifest.len()
    );
    let value = json!({
        "variant": variant.to_string(),
        "task": task.to_string(),
        "config": entry.model,
        "params_total": params_total,
        "manifest": manifest,
    });
    Ok((value, true))
}

/// Audits parameters and FLOPs against the published targets for the entry.
pub fn cmd_profile(
    variant: Variant,
    task: Task,
    input: usize,
    seed: u64,
    config: Option<&Path>,
) -> CmdResult {
    check_input_size(input)?;
    let entry = resolve_entry(variant, task, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(&mut rng, &entry.model)?;
    let report = budget_report(&model, (input, input))?;

    let params_m = report.params_total as f64 / 1e6;
    let target_p = entry.targets.params_millions;
    let params_ok = (params_m - target_p).abs() <= 0.2 * target_p;

    let g1 = report.flops_1x as f64 / 1e9;
    let g2 = report.flops_2x as f64 / 1e9;
    let target_g = entry.targets.gflops_at_640;
    // The published number may count a MAC as one or two FLOPs; accept it
    // anywhere in the widened [1x, 2x] bracket. Targets are quoted at 640².
    let flops_applicable = input == 640;
    let flops_ok = !flops_applicable || (target_g >= 0.8 * g1 && target_g <= 1.2 * g2);

    eprintln!("{}", report.render_table());
    eprintln!(
        "params {params_m:.3}M vs target {target_p}M ({})",
        if params_ok { "within 20%" } else { "OUTSIDE 20%" }
    );
    if flops_applicable {
        eprintln!(
            "gflops bracket [{g1:.1}, {g2:.1}] vs target {target_g} ({})",
            if flops_ok { "contained" } else { "NOT CONTAINED" }
        );
    } else {
        eprintln!("gflops target {target_g} applies at 640x640; profiled {input}x{input}");
    }

    let pass = params_ok && flops_ok;
    let value = json!({
        "variant": variant.to_string(),
        "task": task.to_string(),
        "report": report,
        "targets": entry.targets,
        "checks": {
            "params_within_20pct": params_ok,
            "gflops_bracket_contains_target": if flops_applicable { json!(flops_ok) } else { Value::Null },
        },
        "pass": pass,
    });
    Ok((value, pass))
}

/// One random image through every stage; prints shapes and a deterministic
/// checksum of the final predictions.
pub fn cmd_forward(
    variant: Variant,
    task: Task,
    input: usize,
    seed: u64,
    config: Option<&Path>,
) -> CmdResult {
    check_input_size(input)?;
    let entry = resolve_entry(variant, task, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(&mut rng, &entry.model)?;
    let image = synthetic_images(&mut rng, 1, input).pop().expect("one image");
    let out = model.forward(&image)?;

    let mut stages = Map::new();
    stages.insert("input".into(), json!([3, input, input]));
    stages.insert(
        "backbone".into(),
        json!({
            "grid": [out.grid.0, out.grid.1],
            "blocks": entry.model.backbone.depth,
            "tokens_per_block": [
                entry.model.backbone.registers + out.grid.0 * out.grid.1,
                entry.model.backbone.dim,
            ],
            "registers": entry.model.backbone.registers,
        }),
    );
    stages.insert(
        "pyramid".into(),
        json!({
            "stride8": shape_json(&out.pyramid.maps[0]),
            "stride16": shape_json(&out.pyramid.maps[1]),
            "stride32": shape_json(&out.pyramid.maps[2]),
        }),
    );
    stages.insert(
        "encoder".into(),
        json!({
            "stride8": shape_json(&out.encoder.maps[0]),
            "stride16": shape_json(&out.encoder.maps[1]),
            "stride32": shape_json(&out.encoder.maps[2]),
        }),
    );

    let (decoder_json, sum) = match &out.prediction {
        TaskPrediction::Det(det) => {
            let last = det.layers.last().expect("decoder layers");
            let d = json!({
                "layers": det.layers.len(),
                "logits": shape_json(&last.logits),
                "boxes": shape_json(&last.boxes),
            });
            (d, checksum(&[&last.logits, &last.boxes]))
        }
        TaskPrediction::Pose(pose) => {
            let last = pose.layers.last().expect("decoder layers");
            let n = last.keypoints.shape()[0];
            let k = last.keypoints.shape()[1];
            let d = json!({
                "layers": pose.layers.len(),
                "logits": shape_json(&last.logits),
                "boxes": shape_json(&last.boxes),
                // (x, y, score) per keypoint; score is the sigmoid of the
                // keypoint confidence logit.
                "keypoints": { "shape": [n, k, 3], "layout": ["x", "y", "score"] },
            });
            (d, checksum(&[&last.logits, &last.boxes, &last.keypoints, &last.kpt_logits]))
        }
        TaskPrediction::InsSeg { det, masks } => {
            let last = det.layers.last().expect("decoder layers");
            let mask = masks.last().expect("mask stack per layer");
            let d = json!({
                "layers": det.layers.len(),
                "logits": shape_json(&last.logits),
                "boxes": shape_json(&last.boxes),
                "masks": shape_json(mask),
            });
            (d, checksum(&[&last.logits, &last.boxes, mask]))
        }
    };
    stages.insert("decoder".into(), decoder_json);

    for (name, v) in &stages {
        eprintln!("{name}: {v}");
    }
    eprintln!("checksum {sum}");

    let value = json!({
        "variant": variant.to_string(),
        "task": task.to_string(),
        "seed": seed,
        "stages": stages,
        "checksum": sum,
    });
    Ok((value, true))
}

fn weights_for(task: Task) -> LossWeights {
    match task {
        Task::Detect => LossWeights::detect_default(),
        Task::Pose => LossWeights::pose_default(),
        Task::InstanceSegment => LossWeights::insseg_default(),
    }
}

/// Hungarian assignment vs the exhaustive oracle over random synthetic
/// scenes; exact agreement required, tie-breaks included.
pub fn cmd_match(gt: usize, queries: usize, trials: usize, task: Task, seed: u64) -> CmdResult {
    if gt == 0 || gt > 8 {
        return Err(CliError::Usage(format!(
            "--gt {gt} outside the oracle's exhaustive range 1..=8"
        )));
    }
    if queries < gt {
        return Err(CliError::Usage(format!(
            "--queries {queries} must be at least --gt {gt}"
        )));
    }
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let weights = weights_for(task);
    let scene = SceneConfig::new(task, gt, queries);
    let mut agreements = 0usize;
    let mut last = None;
    for trial in 0..trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add((trial as u64).wrapping_mul(0x9e3779b9)));
        let truth = random_ground_truth(&mut rng, &scene)?;
        let preds = random_predictions(&mut rng, &scene)?;
        let cost = build_cost_matrix(&preds, &truth, &weights, task)?;
        let fast = hungarian(&cost)?;
        let oracle = brute_force_match(&cost)?;
        if fast.pairs == oracle.pairs {
            agreements += 1;
        }
        last = Some(fast);
    }
    let assignment = last.expect("at least one trial");
    let pass = agreements == trials;
    eprintln!("oracle agreement {agreements}/{trials}");

    let value = json!({
        "task": task.to_string(),
        "gt": gt,
        "queries": queries,
        "trials": trials,
        "agreements": agreements,
        "summary": format!("oracle agreement {agreements}/{trials}"),
        "assignment": {
            "pairs": assignment.pairs,
            "total_cost": assignment.total_cost,
        },
        "pass": pass,
    });
    Ok((value, pass))
}

/// Itemized loss report for one random synthetic scene and prediction set.
pub fn cmd_loss(task: Task, gt: usize, queries: usize, seed: u64) -> CmdResult {
    if gt == 0 {
        return Err(CliError::Usage("--gt must be positive".into()));
    }
    if queries < gt {
        return Err(CliError::Usage(format!(
            "--queries {queries} must be at least --gt {gt}"
        )));
    }
    let weights = weights_for(task);
    let scene = SceneConfig::new(task, gt, queries);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = random_ground_truth(&mut rng, &scene)?;
    let preds = random_predictions(&mut rng, &scene)?;
    let cost = build_cost_matrix(&preds, &truth, &weights, task)?;
    let assignment = hungarian(&cost)?;
    let layers = vec![preds];
    let matches = vec![assignment.clone()];
    let report = match task {
        Task::Detect => total_det_loss(&layers, &truth, &matches, &weights)?,
        Task::Pose => total_pose_loss(&layers, &truth, &matches, &weights)?,
        Task::InstanceSegment => total_insseg_loss(&layers, &truth, &matches, &weights)?,
    };

    for (name, v) in &report.items {
        eprintln!("{name}: {v:.6}");
    }
    eprintln!("total: {:.6}", report.total);

    let value = json!({
        "task": task.to_string(),
        "gt": gt,
        "queries": queries,
        "weights": weights,
        "assignment": { "pairs": assignment.pairs, "total_cost": assignment.total_cost },
        "report": { "items": report.items, "total": report.total },
    });
    Ok((value, true))
}

/// Every analytic gradient vs central finite differences.
pub fn cmd_gradcheck(trials: usize, seed: u64) -> CmdResult {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let reports = gradcheck::run_all(trials, seed);
    let mut pass = true;
    for r in &reports {
        eprintln!(
            "{}: max rel err {:.3e} (tol {:.0e}) {}",
            r.op,
            r.max_rel_err,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        );
        pass &= r.pass;
    }
    let value = json!({
        "trials": trials,
        "checks": reports,
        "pass": pass,
    });
    Ok((value, pass))
}

/// Adapter-only distillation run on synthetic images; with the linear-probe
/// teacher the loss must collapse below 1e-3 on a curve that never rises
/// more than 5% epoch-over-epoch.
#[allow(clippy::too_many_arguments)]
pub fn cmd_distill_demo(
    teacher_kind: TeacherKind,
    images: usize,
    image_size: usize,
    epochs: Option<usize>,
    base_lr: Option<f64>,
    batch: Option<usize>,
    seed: u64,
) -> CmdResult {
    if images == 0 || images > 5000 {
        return Err(CliError::Usage(format!(
            "--images {images} outside the demo range 1..=5000"
        )));
    }
    if image_size == 0 || image_size % 32 != 0 {
        return Err(CliError::Usage(format!(
            "--image-size {image_size} is not a positive multiple of 32"
        )));
    }
    let mut cfg = DistillConfig { teacher: teacher_kind, ..DistillConfig::demo_default() };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = base_lr {
        cfg.base_lr = lr;
    }
    if let Some(b) = batch {
        cfg.batch_size = b;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student_cfg = crate::demo_student_config();
    let student = edgecrafter::backbone::Backbone::new(&mut rng, &student_cfg)?;
    let teacher = Teacher::build(teacher_kind, student_cfg.dim, &mut rng)?;
    let images_data = synthetic_images(&mut rng, images, image_size);
    eprintln!(
        "distilling adapter: {} images of {image_size}x{image_size}, {} epochs, batch {}",
        images, cfg.epochs, cfg.batch_size
    );
    let run = run_distillation(&student, &teacher, &images_data, &cfg, &mut rng)?;

    let converged = run.final_loss < 1e-3;
    let monotone = run.epoch_means.windows(2).all(|w| w[1] <= w[0] * 1.05);
    // Convergence is provable only for the probe teacher; mock-teacher runs
    // are informational.
    let pass = !matches!(teacher_kind, TeacherKind::LinearProbe) || (converged && monotone);

    eprintln!(
        "final loss {:.6e} after {} epochs (converged: {converged}, monotone: {monotone})",
        run.final_loss,
        run.epoch_means.len()
    );

    let value = json!({
        "teacher": teacher_kind,
        "config": cfg,
        "student": { "dim": student_cfg.dim, "depth": student_cfg.depth },
        "images": images,
        "image_size": image_size,
        "curve": run.epoch_means,
        "final_loss": run.final_loss,
        "converged": converged,
        "monotone": monotone,
        "pass": pass,
    });
    Ok((value, pass))
}

/// Wraps a command's JSON with the versioned envelope.
pub fn envelope(value: Value) -> Value {
    let mut map = match value {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("result".into(), other);
            m
        }
    };
    map.insert("spec_version".into(), Value::String(SPEC_VERSION.to_string()));
    Value::Object(map)
}
