//! Feature-alignment distillation at desk scale.
//!
//! A frozen student backbone's final-layer tokens are pushed through a
//! trainable linear adapter toward the last layers of a frozen teacher:
//! `L = Σ_l ‖φ(X) − T_l‖²_F`. The adapter is optimized with LARS under a
//! linear-warmup + cosine schedule whose peak follows the square-root
//! batch-size scaling rule. Teachers are either frozen randomly-initialized
//! ViTs at the two reference widths (384 / 768) or a `LinearProbe` whose
//! features are a fixed square linear map of the student's own features,
//! which makes exact convergence provable and observable.

use crate::backbone::{Backbone, BackboneConfig, StemKind};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LARS_MOMENTUM: f64 = 0.9;
pub const LARS_EPS: f64 = 1e-9;
/// Reference batch size of the square-root LR scaling rule.
pub const LR_REFERENCE_BATCH: f64 = 1536.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// Frozen random ViT, width 384, depth 12 (small reference teacher).
    MockS,
    /// Frozen random ViT, width 768, depth 12 (base reference teacher).
    MockB,
    /// Teacher features are a fixed square linear map of the student's
    /// final features (all aligned layers identical), so the adapter can
    /// fit them exactly.
    LinearProbe,
}

impl TeacherKind {
    /// Feature width of the frozen ViT teachers. The linear probe has no
    /// fixed width of its own: it is a square map at the student's dim.
    pub fn mock_dim(&self) -> Option<usize> {
        match self {
            TeacherKind::MockS => Some(384),
            TeacherKind::MockB => Some(768),
            TeacherKind::LinearProbe => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillConfig {
    pub teacher: TeacherKind,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub aligned_teacher_layers: usize,
}

impl DistillConfig {
    /// Full-protocol defaults carried by the registry (batch 128, 50 epochs).
    pub fn protocol(teacher: TeacherKind, base_lr: f64) -> Self {
        DistillConfig {
            teacher,
            base_lr,
            batch_size: 128,
            epochs: 50,
            warmup_epochs: 5,
            final_lr_fraction: 1e-3,
            weight_decay: 1e-6,
            aligned_teacher_layers: 2,
        }
    }

    /// Defaults for the desk-scale linear-probe convergence demo; tuned so
    /// the epoch-mean curve stays monotone and the final loss lands under
    /// 1e-3 on 5000 synthetic 64² images in well under two CPU minutes.
    pub fn demo_default() -> Self {
        DistillConfig {
            teacher: TeacherKind::LinearProbe,
            base_lr: 0.0175,
            batch_size: 8,
            epochs: 50,
            warmup_epochs: 5,
            final_lr_fraction: 1e-3,
            weight_decay: 1e-6,
            aligned_teacher_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config("final_lr_fraction must lie in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(1..=4).contains(&self.aligned_teacher_layers) {
            return Err(Error::config("aligned_teacher_layers must be in 1..=4"));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * (self.batch_size as f64 / LR_REFERENCE_BATCH).sqrt()
    }
}

/// Learning rate at `step`: linear ramp 0 → `peak` over `warmup_steps`,
/// then cosine decay from `peak` to `final_fraction·peak` at `total_steps`.
/// Continuous at the boundary and non-increasing afterwards.
pub fn lr_at(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    peak: f64,
    final_fraction: f64,
) -> f64 {
    debug_assert!(total_steps > warmup_steps);
    let floor = final_fraction * peak;
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let progress =
        ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One LARS update in place. The trust ratio scales the step by
/// ‖param‖ / (‖grad + wd·param‖ + ε); parameters with zero norm use trust
/// ratio 1 so fresh zero-initialized tensors still move. Momentum is
/// heavy-ball on the scaled update.
pub fn lars_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f64],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(format!(
            "lars_step: param {} vs grad {} vs velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let mut p_sq = 0.0f64;
    let mut u_sq = 0.0f64;
    for i in 0..param.len() {
        let p = param[i] as f64;
        let u = grad[i] as f64 + weight_decay * p;
        p_sq += p * p;
        u_sq += u * u;
    }
    let p_norm = p_sq.sqrt();
    let trust = if p_norm == 0.0 { 1.0 } else { p_norm / (u_sq.sqrt() + LARS_EPS) };
    for i in 0..param.len() {
        let u = grad[i] as f64 + weight_decay * param[i] as f64;
        velocity[i] = LARS_MOMENTUM * velocity[i] + lr * trust * u;
        param[i] = (param[i] as f64 - velocity[i]) as f32;
    }
    Ok(())
}

/// Gradients of [`distill_loss`] with respect to the adapter and the
/// student features.
#[derive(Clone, Debug)]
pub struct DistillGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub student: Tensor,
}

/// `L = Σ_l ‖X·Wᵀ + b − T_l‖²_F` over the listed teacher layers, with
/// analytic gradients for `W`, `b`, and `X`. The adapted student feature is
/// computed once and compared against every teacher layer (one-to-many).
pub fn distill_loss(
    student_last: &Tensor,
    teacher_feats: &[Tensor],
    adapter: &Linear,
) -> Result<(f64, DistillGrads)> {
    if teacher_feats.is_empty() {
        return Err(Error::input("distill_loss needs at least one teacher layer"));
    }
    let [n, ds] = student_last.shape()[..] else {
        return Err(Error::shape(format!("student tokens: {:?}", student_last.shape())));
    };
    let dt = adapter.d_out();
    if adapter.d_in() != ds {
        return Err(Error::shape(format!(
            "adapter expects {} input dims, student has {ds}",
            adapter.d_in()
        )));
    }
    for t in teacher_feats {
        if t.shape() != [n, dt] {
            return Err(Error::shape(format!(
                "teacher layer {:?} vs adapted student [{n}, {dt}]; token counts and widths must match",
                t.shape()
            )));
        }
    }

    // The loss is a pure quadratic, so the whole evaluation runs in f64:
    // the adapter and features are tiny, and exact-to-the-ulp gradients are
    // what lets the finite-difference suite hold this op to 1e-5.
    let x = student_last.data();
    let w = adapter.weight.data();
    let b = adapter.bias.as_ref().map(|t| t.data());
    let mut projected = vec![0.0f64; n * dt];
    for r in 0..n {
        for j in 0..dt {
            let mut p = b.map_or(0.0, |b| f64::from(b[j]));
            for c in 0..ds {
                p += f64::from(x[r * ds + c]) * f64::from(w[j * ds + c]);
            }
            projected[r * dt + j] = p;
        }
    }
    // d_sum[i] accumulates Σ_l (φ(X) − T_l)[i].
    let mut d_sum = vec![0.0f64; n * dt];
    let mut loss = 0.0f64;
    for t in teacher_feats {
        for (i, (&p, &tv)) in projected.iter().zip(t.data().iter()).enumerate() {
            let d = p - f64::from(tv);
            loss += d * d;
            d_sum[i] += d;
        }
    }
    // dL/dW = 2·(Σ_l D_l)ᵀ·X ; dL/db = 2·column-sums ; dL/dX = 2·(Σ_l D_l)·W.
    let mut grad_w = vec![0.0f32; dt * ds];
    let mut grad_x = vec![0.0f32; n * ds];
    let mut bias_g = vec![0.0f32; dt];
    for j in 0..dt {
        for c in 0..ds {
            let mut s = 0.0f64;
            for r in 0..n {
                s += d_sum[r * dt + j] * f64::from(x[r * ds + c]);
            }
            grad_w[j * ds + c] = (2.0 * s) as f32;
        }
    }
    for r in 0..n {
        for c in 0..ds {
            let mut s = 0.0f64;
            for j in 0..dt {
                s += d_sum[r * dt + j] * f64::from(w[j * ds + c]);
            }
            grad_x[r * ds + c] = (2.0 * s) as f32;
        }
    }
    for j in 0..dt {
        let mut s = 0.0f64;
        for r in 0..n {
            s += d_sum[r * dt + j];
        }
        bias_g[j] = (2.0 * s) as f32;
    }
    Ok((
        loss,
        DistillGrads {
            weight: Tensor::new(&[dt, ds], grad_w)?,
            bias: Tensor::new(&[dt], bias_g)?,
            student: Tensor::new(&[n, ds], grad_x)?,
        },
    ))
}

/// A frozen teacher producing the feature layers the student aligns to.
pub enum Teacher {
    /// Plain frozen ViT (patch-16 embedding, no register tokens) run on the
    /// same image as the student; alignment targets are its last blocks.
    Mock(Backbone),
    /// Fixed random square linear map of the student's final features;
    /// every aligned layer is the same target.
    LinearProbe(Linear),
}

impl Teacher {
    pub fn build(kind: TeacherKind, student_dim: usize, rng: &mut ChaCha8Rng) -> Result<Teacher> {
        match kind {
            TeacherKind::MockS | TeacherKind::MockB => {
                let dim = kind.mock_dim().expect("mock teachers have fixed widths");
                let cfg = BackboneConfig {
                    dim,
                    depth: 12,
                    heads: dim / 64,
                    ffn_dim: dim * 4,
                    registers: 0,
                    pos_grid: 40,
                    stem: StemKind::Patch16,
                };
                Ok(Teacher::Mock(Backbone::new(rng, &cfg)?))
            }
            TeacherKind::LinearProbe => {
                Ok(Teacher::LinearProbe(Linear::new(rng, student_dim, student_dim, false)))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Teacher::Mock(b) => b.cfg.dim,
            Teacher::LinearProbe(l) => l.d_out(),
        }
    }

    /// Alignment targets for one image given the student's final patch
    /// tokens (registers already stripped).
    pub fn features(
        &self,
        image: &Tensor,
        student_last: &Tensor,
        layers: usize,
    ) -> Result<Vec<Tensor>> {
        match self {
            Teacher::Mock(backbone) => {
                let out = backbone.forward(image)?;
                let depth = out.features.len();
                if layers > depth {
                    return Err(Error::input(format!(
                        "cannot align {layers} teacher layers; teacher has {depth}"
                    )));
                }
                (depth - layers..depth).map(|i| out.patch_tokens(i)).collect()
            }
            Teacher::LinearProbe(map) => {
                let t = map.forward(student_last)?;
                Ok(vec![t; layers])
            }
        }
    }
}

/// Random `size`×`size` images in [0, 1] for the demo runs. Each image is a
/// per-channel base color plus directional gradients, a few solid
/// rectangles, and light pixel noise — enough global and low-frequency
/// structure that backbone token features spread the way they do on natural
/// images, instead of collapsing to a shared mean as pure per-pixel noise
/// does after the stem's smoothing.
pub fn synthetic_images(rng: &mut ChaCha8Rng, count: usize, size: usize) -> Vec<Tensor> {
    (0..count)
        .map(|_| {
            let mut data = vec![0.0f32; 3 * size * size];
            let inv = 1.0 / size as f32;
            for c in 0..3 {
                let base = rng.gen_range(0.0..=1.0f32);
                let slope_y = rng.gen_range(-0.5..=0.5f32);
                let slope_x = rng.gen_range(-0.5..=0.5f32);
                let plane = &mut data[c * size * size..(c + 1) * size * size];
                for y in 0..size {
                    for x in 0..size {
                        plane[y * size + x] =
                            base + slope_y * y as f32 * inv + slope_x * x as f32 * inv;
                    }
                }
            }
            for _ in 0..4 {
                let y0 = rng.gen_range(0..size);
                let x0 = rng.gen_range(0..size);
                let h = rng.gen_range(1..=size / 2);
                let w = rng.gen_range(1..=size / 2);
                let color = [
                    rng.gen_range(0.0..=1.0f32),
                    rng.gen_range(0.0..=1.0f32),
                    rng.gen_range(0.0..=1.0f32),
                ];
                for y in y0..(y0 + h).min(size) {
                    for x in x0..(x0 + w).min(size) {
                        for c in 0..3 {
                            data[c * size * size + y * size + x] = color[c];
                        }
                    }
                }
            }
            for v in data.iter_mut() {
                *v = (*v + rng.gen_range(-0.05..=0.05)).clamp(0.0, 1.0);
            }
            Tensor::new(&[3, size, size], data).expect("structured pixels are finite")
        })
        .collect()
}

/// Loss curve of one distillation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillRun {
    /// Mean batch loss per epoch, in epoch order.
    pub epoch_means: Vec<f64>,
    pub final_loss: f64,
}

/// Optimizes the adapter (the student and teacher stay frozen) with LARS
/// under the warmup+cosine schedule, and reports per-epoch mean losses.
/// Student register tokens are stripped before alignment so token counts
/// match the plain-ViT teachers.
pub fn run_distillation(
    student: &Backbone,
    teacher: &Teacher,
    images: &[Tensor],
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DistillRun> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::input("run_distillation needs at least one image"));
    }
    let layers = cfg.aligned_teacher_layers;
    // Both networks are frozen, so every feature is computed exactly once.
    let mut student_feats = Vec::with_capacity(images.len());
    let mut teacher_feats = Vec::with_capacity(images.len());
    for img in images {
        let out = student.forward(img)?;
        let last = out.patch_tokens(out.features.len() - 1)?;
        teacher_feats.push(teacher.features(img, &last, layers)?);
        student_feats.push(last);
    }

    let ds = student.cfg.dim;
    let dt = teacher.dim();
    let mut adapter = Linear::new(rng, ds, dt, true);
    let mut vel_w = vec![0.0f64; adapter.weight.numel()];
    let mut vel_b = vec![0.0f64; dt];

    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let peak = cfg.peak_lr();

    let mut step = 0usize;
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..cfg.epochs {
        // Fresh batch composition every epoch, deterministic under the seed.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_sum = 0.0f64;
        for batch_start in (0..images.len()).step_by(cfg.batch_size) {
            let end = (batch_start + cfg.batch_size).min(images.len());
            let m = (end - batch_start) as f64;
            let mut batch_loss = 0.0f64;
            let mut gw = vec![0.0f32; adapter.weight.numel()];
            let mut gb = vec![0.0f32; dt];
            for &i in &order[batch_start..end] {
                let (loss, grads) = distill_loss(&student_feats[i], &teacher_feats[i], &adapter)?;
                batch_loss += loss;
                for (acc, &g) in gw.iter_mut().zip(grads.weight.data()) {
                    *acc += g;
                }
                for (acc, &g) in gb.iter_mut().zip(grads.bias.data()) {
                    *acc += g;
                }
            }
            batch_loss /= m;
            for g in gw.iter_mut() {
                *g /= m as f32;
            }
            for g in gb.iter_mut() {
                *g /= m as f32;
            }
            let lr = lr_at(step, total_steps, warmup_steps, peak, cfg.final_lr_fraction);
            lars_step(adapter.weight.data_mut(), &gw, &mut vel_w, lr, cfg.weight_decay)?;
            let bias = adapter.bias.as_mut().expect("adapter has bias");
            lars_step(bias.data_mut(), &gb, &mut vel_b, lr, cfg.weight_decay)?;
            epoch_sum += batch_loss;
            step += 1;
        }
        epoch_means.push(epoch_sum / steps_per_epoch as f64);
    }
    let final_loss = *epoch_means.last().expect("epochs > 0");
    Ok(DistillRun { epoch_means, final_loss })
}

/// Exact least-squares adapter fit: minimizes `Σ_l ‖X·Wᵀ + b − T_l‖²` in
/// closed form (normal equations on the bias-augmented system, or the Gram
/// system when tokens are fewer than input dims), returning the minimizing
/// adapter and the attained loss. f64 throughout.
pub fn fit_adapter_least_squares(
    student: &Tensor,
    teachers: &[Tensor],
) -> Result<(Tensor, Tensor, f64)> {
    if teachers.is_empty() {
        return Err(Error::input("need at least one teacher layer"));
    }
    let [n, ds] = student.shape()[..] else {
        return Err(Error::shape(format!("student tokens: {:?}", student.shape())));
    };
    let dt = teachers[0].shape()[1];
    for t in teachers {
        if t.shape() != [n, dt] {
            return Err(Error::shape("teacher layers must share one shape".to_string()));
        }
    }
    let layers = teachers.len() as f64;
    // The optimum fits the mean teacher: Σ_l ‖X̃Θᵀ−T_l‖² is minimized where
    // X̃ᵀX̃ Θᵀ = X̃ᵀ T̄ with X̃ = [X | 1] and T̄ the layer mean.
    let d_aug = ds + 1;
    let xa = |r: usize, c: usize| -> f64 {
        if c == ds { 1.0 } else { student.row(r)[c] as f64 }
    };
    let mut t_mean = vec![0.0f64; n * dt];
    for t in teachers {
        for (acc, &v) in t_mean.iter_mut().zip(t.data()) {
            *acc += v as f64 / layers;
        }
    }

    // theta[c][j], c over augmented input dims, j over teacher dims.
    let theta: Vec<Vec<f64>> = if n >= d_aug {
        // Normal equations: (X̃ᵀX̃) Θᵀ = X̃ᵀ T̄.
        let mut a = vec![vec![0.0f64; d_aug]; d_aug];
        for i in 0..d_aug {
            for j in i..d_aug {
                let mut s = 0.0;
                for r in 0..n {
                    s += xa(r, i) * xa(r, j);
                }
                a[i][j] = s;
                a[j][i] = s;
            }
        }
        let mut rhs = vec![vec![0.0f64; dt]; d_aug];
        for (i, row) in rhs.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for r in 0..n {
                    s += xa(r, i) * t_mean[r * dt + j];
                }
                *cell = s;
            }
        }
        solve_multi(a, rhs)?
    } else {
        // Underdetermined: interpolate T̄ exactly via the Gram system
        // (X̃X̃ᵀ) α = T̄, Θᵀ = X̃ᵀ α.
        let mut g = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for c in 0..d_aug {
                    s += xa(i, c) * xa(j, c);
                }
                g[i][j] = s;
                g[j][i] = s;
            }
        }
        let rhs: Vec<Vec<f64>> =
            (0..n).map(|r| t_mean[r * dt..(r + 1) * dt].to_vec()).collect();
        let alpha = solve_multi(g, rhs)?;
        let mut theta = vec![vec![0.0f64; dt]; d_aug];
        for (c, row) in theta.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for r in 0..n {
                    s += xa(r, c) * alpha[r][j];
                }
                *cell = s;
            }
        }
        theta
    };

    let mut w = vec![0.0f32; dt * ds];
    let mut b = vec![0.0f32; dt];
    for j in 0..dt {
        for c in 0..ds {
            w[j * ds + c] = theta[c][j] as f32;
        }
        b[j] = theta[ds][j] as f32;
    }
    let weight = Tensor::new(&[dt, ds], w)?;
    let bias = Tensor::new(&[dt], b)?;

    // Attained loss, evaluated in f64 from the solved coefficients.
    let mut loss = 0.0f64;
    for t in teachers {
        for r in 0..n {
            for j in 0..dt {
                let mut pred = theta[ds][j];
                for c in 0..ds {
                    pred += xa(r, c) * theta[c][j];
                }
                let d = pred - t.row(r)[j] as f64;
                loss += d * d;
            }
        }
    }
    Ok((weight, bias, loss))
}

/// Gaussian elimination with partial pivoting for AX = B (multiple RHS).
fn solve_multi(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 * scale {
            return Err(Error::input(
                "least-squares system is singular; features are rank-deficient".to_string(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..b[col].len() {
            let mut s = b[col][k];
            for j in col + 1..n {
                s -= a[col][j] * b[j][k];
            }
            b[col][k] = s / a[col][col];
        }
    }
    Ok(b)
}
