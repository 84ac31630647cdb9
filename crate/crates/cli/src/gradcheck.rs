//! Central finite-difference verification of every analytic gradient in the
//! loss and distillation modules.
//!
//! Each check draws randomized non-degenerate instances, perturbs one input
//! coordinate at a time, and compares the analytic derivative against the
//! central difference. Where the perturbed value lives in f32 storage, the
//! two evaluation points are materialized in f32 first and the divisor is
//! reconstructed from their exact difference, so quantization of the step
//! never pollutes the quotient.

use edgecrafter::distill::distill_loss;
use edgecrafter::losses::{
    bce_mask_loss_grad, coco_keypoint_kappas, cxcywh_to_xyxy, dice_loss_grad, giou_loss_grad,
    kpt_l1_grad, oks_loss_grad, vfl_loss_grad, VflTarget,
};
use edgecrafter::nn::Linear;
use edgecrafter::synthetic::random_box;
use edgecrafter::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Outcome of one gradient suite.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative disagreement with a small floor so near-zero derivatives compare
/// on the scale of the roundoff they actually carry.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

fn giou_check(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let a = cxcywh_to_xyxy(&random_box(&mut rng));
        let b = cxcywh_to_xyxy(&random_box(&mut rng));
        let (_, grad) = giou_loss_grad(&a, &b).expect("positive-area boxes");
        let h = 1e-6f64;
        for i in 0..4 {
            let mut hi = a;
            hi[i] += h;
            let mut lo = a;
            lo[i] -= h;
            // Keep boxes well-formed after perturbation.
            if hi[0] >= hi[2] || hi[1] >= hi[3] || lo[0] >= lo[2] || lo[1] >= lo[3] {
                continue;
            }
            let fd = (giou_loss_grad(&hi, &b).unwrap().0 - giou_loss_grad(&lo, &b).unwrap().0)
                / (2.0 * h);
            max_err = max_err.max(rel_err(grad[i], fd));
        }
    }
    GradCheckReport {
        op: "giou".into(),
        trials,
        max_rel_err: max_err,
        tolerance: 1e-4,
        pass: max_err < 1e-4,
    }
}

fn oks_check(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa = coco_keypoint_kappas();
    let k = kappa.len();
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let pred: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gt: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut vis: Vec<u8> = (0..k).map(|_| u8::from(rng.gen_bool(0.8))).collect();
        vis[0] = 1;
        let s = rng.gen_range(0.1..1.0);
        let (_, grad) = oks_loss_grad(&pred, &gt, &vis, s, &kappa).expect("visible keypoints");
        let h = 1e-6f64;
        for i in 0..2 * k {
            let mut hi = pred.clone();
            hi[i] += h;
            let mut lo = pred.clone();
            lo[i] -= h;
            let fd = (oks_loss_grad(&hi, &gt, &vis, s, &kappa).unwrap().0
                - oks_loss_grad(&lo, &gt, &vis, s, &kappa).unwrap().0)
                / (2.0 * h);
            max_err = max_err.max(rel_err(grad[i], fd));
        }
    }
    GradCheckReport {
        op: "oks".into(),
        trials,
        max_rel_err: max_err,
        tolerance: 1e-4,
        pass: max_err < 1e-4,
    }
}

fn kpt_l1_check(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 17;
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let gt: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        // L1 is non-smooth at zero error; keep every coordinate away from it.
        let pred: Vec<f64> = gt
            .iter()
            .map(|&g| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                g + sign * rng.gen_range(0.01..0.2)
            })
            .collect();
        let mut vis: Vec<u8> = (0..k).map(|_| u8::from(rng.gen_bool(0.8))).collect();
        vis[0] = 1;
        let (_, grad) = kpt_l1_grad(&pred, &gt, &vis).expect("visible keypoints");
        let h = 1e-6f64;
        for i in 0..2 * k {
            let mut hi = pred.clone();
            hi[i] += h;
            let mut lo = pred.clone();
            lo[i] -= h;
            let fd = (kpt_l1_grad(&hi, &gt, &vis).unwrap().0
                - kpt_l1_grad(&lo, &gt, &vis).unwrap().0)
                / (2.0 * h);
            max_err = max_err.max(rel_err(grad[i], fd));
        }
    }
    GradCheckReport {
        op: "kpt_l1".into(),
        trials,
        max_rel_err: max_err,
        tolerance: 1e-4,
        pass: max_err < 1e-4,
    }
}

/// Central difference on a scalar function of one f32 tensor entry, with the
/// step reconstructed from the realized f32 values.
fn fd_f32<F: FnMut(&Tensor) -> f64>(t: &Tensor, idx: usize, h: f32, mut f: F) -> f64 {
    let base = t.data()[idx];
    let mut hi = t.clone();
    hi.data_mut()[idx] = base + h;
    let mut lo = t.clone();
    lo.data_mut()[idx] = base - h;
    let span = f64::from(hi.data()[idx]) - f64::from(lo.data()[idx]);
    (f(&hi) - f(&lo)) / span
}

fn bce_check(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let n = 12usize;
        let logits = Tensor::new(
            &[n],
            (0..n).map(|_| rng.gen_range(-4.0f32..=4.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let gt = Tensor::new(
            &[n],
            (0..n).map(|_| f32::from(u8::from(rng.gen_bool(0.5)))).collect::<Vec<_>>(),
        )
        .unwrap();
        let (_, grad) = bce_mask_loss_grad(&logits, &gt).unwrap();
        for i in 0..n {
            let fd = fd_f32(&logits, i, 1e-3, |t| bce_mask_loss_grad(t, &gt).unwrap().0);
            max_err = max_err.max(rel_err(f64::from(grad.data()[i]), fd));
        }
    }
    GradCheckReport {
        op: "bce".into(),
        trials,
        max_rel_err: max_err,
        tolerance: 1e-4,
        pass: max_err < 1e-4,
    }
}

fn dice_check(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let n = 12usize;
        let probs = Tensor::new(
            &[n],
            (0..n).map(|_| rng.gen_range(0.05f32..=0.95)).collect::<Vec<_>>(),
        )
        .unwrap();
        let gt = Tensor::new(
            &[n],
            (0..n).map(|_| f32::from(u8::from(rng.gen_bool(0.5)))).collect::<Vec<_>>(),
        )
        .unwrap();
        let (_, grad) = dice_loss_grad(&probs, &gt).unwrap();
        for i in 0..n {
            let fd = fd_f32(&probs, i, 1e-3, |t| dice_loss_grad(t, &gt).unwrap().0);
            max_err = max_err.max(rel_err(f64::from(grad.data()[i]), fd));
        }
    }
    GradCheckReport {
        op: "dice".into(),
        trials,
        max_rel_err: max_err,
        tolerance: 1e-4,
        pass: max_err < 1e-4,
    }
}

fn vfl_check(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let (n, c) = (6usize, 5usize);
        let logits = Tensor::new(
            &[n, c],
            (0..n * c).map(|_| rng.gen_range(-4.0f32..=4.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let targets: Vec<VflTarget> = (0..3)
            .map(|q| VflTarget {
                query: q,
                class: rng.gen_range(0..c),
                quality: rng.gen_range(0.05..1.0),
            })
            .collect();
        let (_, grad) = vfl_loss_grad(&logits, &targets).unwrap();
        for i in 0..n * c {
            let fd = fd_f32(&logits, i, 1e-3, |t| vfl_loss_grad(t, &targets).unwrap().0);
            max_err = max_err.max(rel_err(f64::from(grad.data()[i]), fd));
        }
    }
    GradCheckReport {
        op: "vfl".into(),
        trials,
        max_rel_err: max_err,
        tolerance: 1e-4,
        pass: max_err < 1e-4,
    }
}

fn distill_check(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let (n, ds, dt) = (4usize, 5usize, 7usize);
        let x = Tensor::new(
            &[n, ds],
            (0..n * ds).map(|_| rng.gen_range(-1.0f32..=1.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let teachers: Vec<Tensor> = (0..2)
            .map(|_| {
                Tensor::new(
                    &[n, dt],
                    (0..n * dt).map(|_| rng.gen_range(-1.0f32..=1.0)).collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        let adapter = Linear::new(&mut rng, ds, dt, true);
        let (_, grads) = distill_loss(&x, &teachers, &adapter).unwrap();

        // The loss is exactly quadratic in both the adapter weight and the
        // student features, so the central difference carries no truncation
        // term; evaluating it in f64 removes roundoff too, which is what
        // lets this suite run at a 10x tighter tolerance.
        let x64: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
        let w64: Vec<f64> = adapter.weight.data().iter().map(|&v| f64::from(v)).collect();
        let b64: Vec<f64> =
            adapter.bias.as_ref().unwrap().data().iter().map(|&v| f64::from(v)).collect();
        let t64: Vec<Vec<f64>> = teachers
            .iter()
            .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
            .collect();
        // L(W, b, X) = Σ_l ‖X·Wᵀ + b − T_l‖², elementwise in f64.
        let loss64 = |w: &[f64], xs: &[f64]| -> f64 {
            let mut loss = 0.0;
            for t in &t64 {
                for r in 0..n {
                    for j in 0..dt {
                        let mut p = b64[j];
                        for c in 0..ds {
                            p += xs[r * ds + c] * w[j * ds + c];
                        }
                        let d = p - t[r * dt + j];
                        loss += d * d;
                    }
                }
            }
            loss
        };
        let h = 0.1f64;
        for idx in [0usize, ds + 1, 2 * ds + 3, dt * ds - 1] {
            let an = f64::from(grads.weight.data()[idx]);
            let mut hi = w64.clone();
            hi[idx] += h;
            let mut lo = w64.clone();
            lo[idx] -= h;
            let fd = (loss64(&hi, &x64) - loss64(&lo, &x64)) / (2.0 * h);
            max_err = max_err.max(rel_err(an, fd));
        }
        for idx in [0usize, ds + 2, n * ds - 1] {
            let an = f64::from(grads.student.data()[idx]);
            let mut hi = x64.clone();
            hi[idx] += h;
            let mut lo = x64.clone();
            lo[idx] -= h;
            let fd = (loss64(&w64, &hi) - loss64(&w64, &lo)) / (2.0 * h);
            max_err = max_err.max(rel_err(an, fd));
        }
    }
    GradCheckReport {
        op: "distill_quadratic".into(),
        trials,
        max_rel_err: max_err,
        tolerance: 1e-5,
        pass: max_err < 1e-5,
    }
}

/// Runs every gradient suite with deterministic per-suite seeds.
pub fn run_all(trials: usize, seed: u64) -> Vec<GradCheckReport> {
    vec![
        giou_check(trials, seed.wrapping_add(1)),
        oks_check(trials, seed.wrapping_add(2)),
        kpt_l1_check(trials, seed.wrapping_add(3)),
        bce_check(trials, seed.wrapping_add(4)),
        dice_check(trials, seed.wrapping_add(5)),
        vfl_check(trials, seed.wrapping_add(6)),
        distill_check(trials, seed.wrapping_add(7)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_at_default_trials() {
        let reports = run_all(20, 17);
        for r in &reports {
            assert!(r.pass, "{} failed: max rel err {}", r.op, r.max_rel_err);
        }
        assert_eq!(reports.len(), 7);
    }
}
