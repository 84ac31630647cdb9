//! Acceptance gate: one test per promised quantitative property of the
//! model family — published budget reproduction, ablation structure,
//! matcher/oracle agreement, gradient fidelity, hand-derived loss values,
//! schedule and optimizer constants, architecture invariants, distillation
//! convergence, and bitwise determinism. Each test checks its property at
//! the stated tolerance, enforces its runtime limit, and prints a single
//! verdict line.
//!
//! The runtime limits assume the suite owns the core it runs on, so every
//! test serializes through one lock.

use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use edgecrafter::backbone::{BackboneOutput, StemKind};
use edgecrafter::budget::budget_report;
use edgecrafter::decoder::DeformableAttn;
use edgecrafter::distill::{fit_adapter_least_squares, lars_step, lr_at, DistillConfig, TeacherKind};
use edgecrafter::losses::{
    giou_xyxy, oks, total_det_loss, total_insseg_loss, total_pose_loss, GroundTruthSet,
    LossWeights, PredictionSet, Task,
};
use edgecrafter::matching::{brute_force_match, build_cost_matrix, hungarian, CostMatrix};
use edgecrafter::model::{Model, ModelConfig, TaskPrediction};
use edgecrafter::ops;
use edgecrafter::pyramid::{tokens_to_map, Fusion, Pyramid, PYRAMID_STRIDES};
use edgecrafter::registry::{registry_entry, Variant};
use edgecrafter::synthetic::{random_ground_truth, SceneConfig};
use edgecrafter::tensor::Tensor;
use edgecrafter_cli::commands::cmd_distill_demo;
use edgecrafter_cli::gradcheck;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    // A failed criterion poisons the lock; the rest must still run.
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(number: usize, name: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("criterion {number} ({name}): PASS");
    } else {
        println!("criterion {number} ({name}): FAIL");
        panic!("criterion {number} ({name}):\n  {}", failures.join("\n  "));
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).unwrap()
}

#[test]
fn criterion_1_budget_reproduction() {
    let _g = gate();
    let started = Instant::now();
    let mut failures = Vec::new();

    let cases: Vec<(Variant, Task)> = Variant::all()
        .into_iter()
        .map(|v| (v, Task::Detect))
        .chain([(Variant::S, Task::Pose), (Variant::S, Task::InstanceSegment)])
        .collect();
    for (variant, task) in cases {
        let entry = registry_entry(variant, task);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&mut rng, &entry.model).unwrap();
        let report = budget_report(&model, (640, 640)).unwrap();

        let params = report.params_total as f64;
        let within = |millions: f64| (params - millions * 1e6).abs() <= 0.2 * millions * 1e6;
        // The M detector carries two published totals (family table vs
        // ablation table); hitting either counts.
        let params_ok = if variant == Variant::M && task == Task::Detect {
            within(18.0) || within(19.2)
        } else {
            within(entry.targets.params_millions)
        };
        if !params_ok {
            failures.push(format!(
                "{variant:?} {task:?}: {params:.0} params misses {}M within 20%",
                entry.targets.params_millions
            ));
        }

        let flops_target = entry.targets.gflops_at_640 * 1e9;
        let lo = 0.8 * report.flops_1x as f64;
        let hi = 1.2 * report.flops_2x as f64;
        if !(lo <= flops_target && flops_target <= hi) {
            failures.push(format!(
                "{variant:?} {task:?}: {} GFLOP outside [{:.1}, {:.1}]",
                entry.targets.gflops_at_640,
                lo / 1e9,
                hi / 1e9
            ));
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= 10.0 {
        failures.push(format!("profiling took {elapsed:.1} s, budget is 10 s"));
    }
    verdict(1, "budget reproduction", failures);
}

#[test]
fn criterion_2_ablation_structure() {
    let _g = gate();
    let mut failures = Vec::new();
    let base = registry_entry(Variant::M, Task::Detect).model;
    let audit = |cfg: &ModelConfig| -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&mut rng, cfg).unwrap();
        let report = budget_report(&model, (640, 640)).unwrap();
        (report.params_total, report.macs_total)
    };

    // Stem dilation widens the receptive field without touching cost.
    let dilated: Vec<(u64, u64)> = (1..=3)
        .map(|d| {
            let mut cfg = base.clone();
            cfg.backbone.stem = StemKind::Conv { dilation: d };
            audit(&cfg)
        })
        .collect();
    if dilated[0] != dilated[1] || dilated[1] != dilated[2] {
        failures.push(format!("stem dilation changed the budget: {dilated:?}"));
    }

    // A bare patch embedding sheds 0.1M-0.3M parameters at the M scale.
    let mut patch = base.clone();
    patch.backbone.stem = StemKind::Patch16;
    let (patch_params, _) = audit(&patch);
    let delta = dilated[0].0 as i64 - patch_params as i64;
    if delta != 192_512 {
        failures.push(format!("conv-vs-patch stem delta {delta}, expected 192512"));
    }
    if !(100_000..=300_000).contains(&delta) {
        failures.push(format!("stem delta {delta} outside 0.1M-0.3M"));
    }

    // Mean fusion is free across trailing-block ranges; concat is not.
    let means: Vec<(u64, u64)> = (1..=3)
        .map(|k| {
            let mut cfg = base.clone();
            cfg.pyramid.fuse_last = k;
            cfg.pyramid.fusion = Fusion::Mean;
            audit(&cfg)
        })
        .collect();
    if means[0] != means[1] || means[1] != means[2] {
        failures.push(format!("mean-fusion range changed the budget: {means:?}"));
    }
    let mut cat = base.clone();
    cat.pyramid.fuse_last = 2;
    cat.pyramid.fusion = Fusion::Concat;
    let (cat_params, cat_macs) = audit(&cat);
    if cat_params <= means[0].0 || cat_macs <= means[0].1 {
        failures.push(format!(
            "concat fusion should cost more than mean: {:?} vs {:?}",
            (cat_params, cat_macs),
            means[0]
        ));
    }

    verdict(2, "ablation structure", failures);
}

#[test]
fn criterion_3_matching_oracle() {
    let _g = gate();
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let check = |vals: Vec<f32>, label: String, failures: &mut Vec<String>| {
        let cm = CostMatrix::new(Tensor::new(&[5, 7], vals).unwrap()).unwrap();
        let fast = hungarian(&cm).unwrap();
        let slow = brute_force_match(&cm).unwrap();
        if fast.pairs != slow.pairs && failures.len() < 5 {
            failures.push(format!("{label}: {:?} vs oracle {:?}", fast.pairs, slow.pairs));
        }
    };
    for i in 0..1000 {
        let vals = (0..35).map(|_| rng.gen_range(-5.0..=5.0)).collect();
        check(vals, format!("random {i}"), &mut failures);
    }
    // Quantized costs force ties in nearly every matrix.
    for i in 0..200 {
        let vals = (0..35).map(|_| rng.gen_range(0..=3) as f32 * 0.5).collect();
        check(vals, format!("tie-heavy {i}"), &mut failures);
    }

    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= 5.0 {
        failures.push(format!("1200 matrices took {elapsed:.1} s, budget is 5 s"));
    }
    verdict(3, "matching oracle", failures);
}

#[test]
fn criterion_4_gradient_suite() {
    let _g = gate();
    let started = Instant::now();
    let mut failures = Vec::new();

    let reports = gradcheck::run_all(100, 2024);
    if reports.len() != 7 {
        failures.push(format!("expected 7 gradient suites, ran {}", reports.len()));
    }
    for r in &reports {
        let want_tol = if r.op.contains("distill") { 1e-5 } else { 1e-4 };
        if (r.tolerance - want_tol).abs() > f64::EPSILON {
            failures.push(format!("{} runs at tolerance {:e}, expected {want_tol:e}", r.op, r.tolerance));
        }
        if r.trials < 100 {
            failures.push(format!("{}: only {} trials", r.op, r.trials));
        }
        if !r.pass {
            failures.push(format!("{}: max rel err {:.3e} over {:e}", r.op, r.max_rel_err, r.tolerance));
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= 30.0 {
        failures.push(format!("gradient suites took {elapsed:.1} s, budget is 30 s"));
    }
    verdict(4, "gradient suite", failures);
}

/// Predictions that reproduce the ground truth exactly: matched queries get
/// saturated logits on the true class, the true box/keypoints/mask; the
/// rest are confidently background.
fn perfect_predictions(gt: &GroundTruthSet, task: Task, n: usize, classes: usize) -> PredictionSet {
    let g = gt.len();
    let mut logits = vec![-40.0f32; n * classes];
    let mut boxes = Vec::with_capacity(n * 4);
    for i in 0..n {
        if i < g {
            logits[i * classes + gt.classes[i]] = 40.0;
            boxes.extend_from_slice(gt.boxes.row(i));
        } else {
            boxes.extend_from_slice(&[0.5, 0.5, 0.2, 0.2]);
        }
    }
    let keypoints = gt.keypoints.as_ref().map(|gk| {
        let k = gk.shape()[1];
        let mut data = Vec::with_capacity(n * k * 2);
        for i in 0..n {
            if i < g {
                let row = &gk.data()[i * k * 2..(i + 1) * k * 2];
                data.extend_from_slice(row);
            } else {
                data.extend(std::iter::repeat(0.5).take(k * 2));
            }
        }
        Tensor::new(&[n, k, 2], data).unwrap()
    });
    let kpt_logits = gt.keypoints.as_ref().map(|gk| {
        let k = gk.shape()[1];
        Tensor::new(&[n, k], vec![0.0; n * k]).unwrap()
    });
    let masks = gt.masks.as_ref().map(|gm| {
        let (hm, wm) = (gm.shape()[1], gm.shape()[2]);
        let cells = hm * wm;
        let mut data = vec![-40.0f32; n * cells];
        for i in 0..g {
            for (d, &m) in data[i * cells..(i + 1) * cells].iter_mut().zip(&gm.data()[i * cells..]) {
                *d = m * 80.0 - 40.0;
            }
        }
        Tensor::new(&[n, hm, wm], data).unwrap()
    });
    let pred = PredictionSet {
        logits: Tensor::new(&[n, classes], logits).unwrap(),
        boxes: Tensor::new(&[n, 4], boxes).unwrap(),
        keypoints,
        kpt_logits,
        masks,
    };
    pred.validate(task).unwrap();
    pred
}

#[test]
fn criterion_5_loss_formula_fidelity() {
    let _g = gate();
    let mut failures = Vec::new();

    // Unit squares overlapping in a 1x1 corner: inter 1, union 7, hull 9.
    let v = giou_xyxy(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]).unwrap();
    let expect = 1.0 / 7.0 - 2.0 / 9.0;
    if (v - expect).abs() > 1e-6 {
        failures.push(format!("giou corner case {v} vs {expect}"));
    }

    // One keypoint displaced by exactly s*kappa scores e^(-1/2).
    let (s, kappa) = (0.2, 0.1);
    let got = oks(&[0.5 + s * kappa, 0.5], &[0.5, 0.5], &[1], s, &[kappa]).unwrap();
    if (got - (-0.5f64).exp()).abs() > 1e-6 {
        failures.push(format!("oks at one kappa-scale {got} vs e^-0.5"));
    }

    // Two teachers, adapter free to interpolate (5 tokens, 8 input dims):
    // the best achievable loss is half the squared distance between them.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[5, 8], 1.0);
    let a = rand_tensor(&mut rng, &[5, 7], 1.0);
    let b = rand_tensor(&mut rng, &[5, 7], 1.0);
    let (_, _, loss) = fit_adapter_least_squares(&x, &[a.clone(), b.clone()]).unwrap();
    let half_sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = (p - q) as f64;
            d * d
        })
        .sum::<f64>()
        / 2.0;
    if (loss - half_sq).abs() > 1e-5 {
        failures.push(format!("two-teacher minimum {loss} vs {half_sq}"));
    }

    // Perfect predictions zero out every task total.
    for task in [Task::Detect, Task::Pose, Task::InstanceSegment] {
        let scene = SceneConfig::new(task, 5, 20);
        let gt = random_ground_truth(&mut rng, &scene).unwrap();
        let pred = perfect_predictions(&gt, task, scene.num_queries, scene.num_classes);
        let weights = match task {
            Task::Detect => LossWeights::detect_default(),
            Task::Pose => LossWeights::pose_default(),
            Task::InstanceSegment => LossWeights::insseg_default(),
        };
        let cm = build_cost_matrix(&pred, &gt, &weights, task).unwrap();
        let m = hungarian(&cm).unwrap();
        let report = match task {
            Task::Detect => total_det_loss(&[pred], &gt, &[m], &weights),
            Task::Pose => total_pose_loss(&[pred], &gt, &[m], &weights),
            Task::InstanceSegment => total_insseg_loss(&[pred], &gt, &[m], &weights),
        }
        .unwrap();
        if report.total.abs() > 1e-9 {
            failures.push(format!("{task:?} total {:.3e} on perfect predictions", report.total));
        }
    }

    verdict(5, "loss formula fidelity", failures);
}

#[test]
fn criterion_6_schedule_and_optimizer() {
    let _g = gate();
    let mut failures = Vec::new();

    // base_lr 4.0 at batch 128 against the reference batch of 1536.
    let cfg = DistillConfig { base_lr: 4.0, batch_size: 128, ..DistillConfig::demo_default() };
    let peak = cfg.peak_lr();
    if (peak - 1.154700538).abs() > 1e-9 {
        failures.push(format!("peak lr {peak} vs 1.154700538"));
    }
    if (peak - 4.0 * (128.0f64 / 1536.0).sqrt()).abs() > 1e-12 {
        failures.push(format!("peak lr {peak} is not 4*sqrt(128/1536)"));
    }

    let (total, warm) = (1000usize, 50usize);
    let last = lr_at(total, total, warm, peak, 1e-3);
    if (last - 1e-3 * peak).abs() > 1e-9 {
        failures.push(format!("final lr {last} vs 1e-3 of peak"));
    }
    // The ramp hands over at exactly the peak, and decay never rises.
    if (lr_at(warm, total, warm, peak, 1e-3) - peak).abs() > 1e-9 {
        failures.push("cosine does not start at the peak".into());
    }
    let before = lr_at(warm - 1, total, warm, peak, 1e-3);
    if (before - peak * (warm as f64 - 1.0) / warm as f64).abs() > 1e-9 {
        failures.push("warmup ramp is not linear up to the boundary".into());
    }
    let mut prev = peak;
    for step in warm..=total {
        let lr = lr_at(step, total, warm, peak, 1e-3);
        if lr > prev + 1e-12 {
            failures.push(format!("lr rose at step {step}: {prev} -> {lr}"));
            break;
        }
        prev = lr;
    }

    // LARS on 0.5*w^2 from w = 1: trust ratio is identically 1 and the
    // momentum recursion contracts to the zero minimum.
    let mut w = [1.0f32];
    let mut vel = [0.0f64];
    for _ in 0..500 {
        let grad = [w[0]];
        lars_step(&mut w, &grad, &mut vel, 0.1, 0.0).unwrap();
    }
    if w[0].abs() >= 1e-8 {
        failures.push(format!("scalar quadratic stalled at |w| = {:.3e}", w[0].abs()));
    }

    verdict(6, "schedule and optimizer", failures);
}

#[test]
fn criterion_7_architecture_invariants() {
    let _g = gate();
    let mut failures = Vec::new();

    if PYRAMID_STRIDES != [8, 16, 32] {
        failures.push(format!("pyramid strides {PYRAMID_STRIDES:?}"));
    }

    // Full S detection forward at 320: exact scale shapes, box ranges.
    let entry = registry_entry(Variant::S, Task::Detect);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = Model::new(&mut rng, &entry.model).unwrap();
    let img = rand_tensor(&mut rng, &[3, 320, 320], 1.0);
    let out = model.forward(&img).unwrap();
    for (map, want) in out.pyramid.maps.iter().zip([[192, 40, 40], [192, 20, 20], [192, 10, 10]]) {
        if map.shape() != want {
            failures.push(format!("320 pyramid map {:?}, expected {want:?}", map.shape()));
        }
    }
    match &out.prediction {
        TaskPrediction::Det(det) => {
            if det.layers.len() != entry.model.decoder.num_layers {
                failures.push(format!("{} decoder layers", det.layers.len()));
            }
            let last = det.layers.last().unwrap();
            if last.logits.shape() != [300, 80] {
                failures.push(format!("final logits {:?}", last.logits.shape()));
            }
            for (li, layer) in det.layers.iter().enumerate() {
                if layer.boxes.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    failures.push(format!("detection layer {li} box outside [0,1]"));
                }
            }
        }
        _ => failures.push("detection config produced a non-detection head".into()),
    }

    // Pose keypoints stay normalized through every refinement layer.
    let pose_entry = registry_entry(Variant::S, Task::Pose);
    let pose_model = Model::new(&mut rng, &pose_entry.model).unwrap();
    let pose_out = pose_model.forward(&img).unwrap();
    match &pose_out.prediction {
        TaskPrediction::Pose(pose) => {
            for (li, layer) in pose.layers.iter().enumerate() {
                if layer.keypoints.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    failures.push(format!("pose layer {li} keypoint outside [0,1]"));
                }
                if layer.boxes.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    failures.push(format!("pose layer {li} box outside [0,1]"));
                }
            }
        }
        _ => failures.push("pose config produced a non-pose head".into()),
    }

    // 640-input pyramid shapes, driven from a synthetic stride-16 grid.
    let pyr = Pyramid::new(&mut rng, &entry.model.pyramid).unwrap();
    let features = (0..2).map(|_| rand_tensor(&mut rng, &[1 + 1600, 192], 1.0)).collect();
    let bb = BackboneOutput { features, grid: (40, 40), registers: 1 };
    let pyr_out = pyr.forward(&bb).unwrap();
    for (map, want) in pyr_out.maps.iter().zip([[192, 80, 80], [192, 40, 40], [192, 20, 20]]) {
        if map.shape() != want {
            failures.push(format!("640 pyramid map {:?}, expected {want:?}", map.shape()));
        }
    }

    // Register rows are stripped before any spatial reshape, and a map the
    // size of the register-bearing sequence is refused outright.
    let toks = bb.patch_tokens(0).unwrap();
    if toks.shape() != [1600, 192] {
        failures.push(format!("patch tokens {:?}, expected [1600, 192]", toks.shape()));
    }
    if tokens_to_map(&bb.features[0], 40, 40).is_ok() {
        failures.push("tokens_to_map accepted register rows".into());
    }

    // One level, one point, offsets forced to zero: deformable attention
    // reduces to a single bilinear sample plus the output projection.
    let mut attn = DeformableAttn::new(&mut rng, 8, 2, 1, 1);
    attn.offset.weight = Tensor::zeros(&[4, 8]);
    attn.offset.bias = Some(Tensor::zeros(&[4]));
    let level = rand_tensor(&mut rng, &[8, 6, 6], 1.0);
    let values = attn.project_values(std::slice::from_ref(&level)).unwrap();
    let x = rand_tensor(&mut rng, &[3, 8], 1.0);
    let refs = Tensor::new(&[3, 2], vec![0.3, 0.4, 0.6, 0.2, 0.5, 0.9]).unwrap();
    let got = attn.forward(&x, &refs, &values).unwrap();
    let mut direct = vec![0.0f32; 3 * 8];
    for q in 0..3 {
        ops::sample_point(&values[0], refs.row(q)[0], refs.row(q)[1], &mut direct[q * 8..(q + 1) * 8])
            .unwrap();
    }
    let expect = attn.out.forward(&Tensor::new(&[3, 8], direct).unwrap()).unwrap();
    let worst = got
        .data()
        .iter()
        .zip(expect.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    if worst > 1e-6 {
        failures.push(format!("degenerate deformable attention off by {worst:.3e}"));
    }

    // Softmax rows stay normalized even with extreme logits.
    let wild = rand_tensor(&mut rng, &[7, 13], 60.0);
    let sm = ops::softmax(&wild).unwrap();
    for r in 0..7 {
        let sum: f64 = sm.row(r).iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            failures.push(format!("softmax row {r} sums to {sum}"));
        }
    }

    verdict(7, "architecture invariants", failures);
}

#[test]
fn criterion_8_distillation_convergence() {
    let _g = gate();
    let started = Instant::now();
    let mut failures = Vec::new();

    // The demo exactly as shipped: 5000 synthetic 64x64 images, default
    // config, default seed.
    let (value, pass) =
        cmd_distill_demo(TeacherKind::LinearProbe, 5000, 64, None, None, None, 0).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let final_loss = value["final_loss"].as_f64().unwrap();
    let curve: Vec<f64> =
        value["curve"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    if !pass {
        failures.push("demo command reported failure".into());
    }
    if curve.len() != 50 {
        failures.push(format!("{} epochs, expected 50", curve.len()));
    }
    if final_loss >= 1e-3 {
        failures.push(format!("final loss {final_loss:.3e} is not below 1e-3"));
    }
    for (i, w) in curve.windows(2).enumerate() {
        if w[1] > w[0] * 1.05 {
            failures.push(format!("epoch mean rose {:.3e} -> {:.3e} at epoch {}", w[0], w[1], i + 1));
            break;
        }
    }
    if elapsed >= 120.0 {
        failures.push(format!("demo took {elapsed:.1} s, budget is 120 s"));
    }

    verdict(8, "distillation convergence", failures);
}

#[test]
fn criterion_9_determinism() {
    let _g = gate();
    let mut failures = Vec::new();

    let run = || {
        let out = Command::new(env!("CARGO_BIN_EXE_edgecrafter"))
            .args(["forward", "S", "det", "--input", "320", "--seed", "7"])
            .output()
            .expect("spawn forward");
        assert!(out.status.success(), "forward exited with {:?}", out.status);
        out.stdout
    };
    let first = run();
    let second = run();
    if first.is_empty() {
        failures.push("forward produced no stdout".into());
    }
    if first != second {
        failures.push("stdout differs between identical seeded runs".into());
    }

    verdict(9, "determinism", failures);
}
