//! Training losses: box geometry (L1, GIoU), keypoint similarity (OKS),
//! varifocal classification, mask BCE + Dice, and the per-task totals that
//! combine them across decoder layers.
//!
//! The scalar geometric losses ship analytic gradients, each validated
//! against central finite differences in the test and CLI gradcheck suites.
//! All loss math runs in f64; tensors store f32.

use crate::error::{Error, Result};
use crate::matching::MatchAssignment;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Term weights for matching costs and training losses. Unused terms for a
/// task are simply zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Distribution-refinement hook; carried but its internals contribute 0.
    pub lambda_ddf: f64,
    /// Localization-guidance hook; carried but its internals contribute 0.
    pub lambda_fgl: f64,
    pub lambda_kpt: f64,
    pub lambda_oks: f64,
    pub lambda_mask: f64,
    pub lambda_dice: f64,
}

impl LossWeights {
    pub fn detect_default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_ddf: 1.5,
            lambda_fgl: 0.15,
            lambda_kpt: 0.0,
            lambda_oks: 0.0,
            lambda_mask: 0.0,
            lambda_dice: 0.0,
        }
    }

    pub fn pose_default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_l1: 0.0,
            lambda_giou: 0.0,
            lambda_ddf: 0.0,
            lambda_fgl: 0.0,
            lambda_kpt: 10.0,
            lambda_oks: 4.0,
            lambda_mask: 0.0,
            lambda_dice: 0.0,
        }
    }

    pub fn insseg_default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_l1: 1.0,
            lambda_giou: 1.0,
            lambda_ddf: 1.5,
            lambda_fgl: 0.15,
            lambda_kpt: 0.0,
            lambda_oks: 0.0,
            lambda_mask: 5.0,
            lambda_dice: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cls", self.lambda_cls),
            ("l1", self.lambda_l1),
            ("giou", self.lambda_giou),
            ("ddf", self.lambda_ddf),
            ("fgl", self.lambda_fgl),
            ("kpt", self.lambda_kpt),
            ("oks", self.lambda_oks),
            ("mask", self.lambda_mask),
            ("dice", self.lambda_dice),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which prediction head a loss/cost evaluation serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detect,
    Pose,
    InstanceSegment,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Detect => "det",
            Task::Pose => "pose",
            Task::InstanceSegment => "insseg",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "det" | "detect" => Ok(Task::Detect),
            "pose" => Ok(Task::Pose),
            "insseg" | "instance_segment" => Ok(Task::InstanceSegment),
            other => Err(Error::input(format!(
                "unknown task '{other}'; valid options: det, pose, insseg"
            ))),
        }
    }
}

/// Ground-truth annotations for one image. Boxes are normalized
/// `(cx, cy, w, h)`; keypoints, visibility, per-person scale, and stride-4
/// binary masks are present only for the tasks that need them.
#[derive(Clone, Debug)]
pub struct GroundTruthSet {
    pub boxes: Tensor,
    pub classes: Vec<usize>,
    /// `[G, K, 2]` normalized positions.
    pub keypoints: Option<Tensor>,
    /// `[G, K]` of {0,1}.
    pub visibility: Option<Tensor>,
    /// Person scale (square root of area), one per ground truth.
    pub scales: Option<Vec<f32>>,
    /// `[G, Hm, Wm]` of {0,1}.
    pub masks: Option<Tensor>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        let [g, four] = self.boxes.shape()[..] else {
            return Err(Error::shape(format!("gt boxes: {:?}", self.boxes.shape())));
        };
        if four != 4 {
            return Err(Error::shape(format!("gt boxes: {:?}", self.boxes.shape())));
        }
        if self.classes.len() != g {
            return Err(Error::shape(format!("gt classes: {} vs {g} boxes", self.classes.len())));
        }
        for &v in self.boxes.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("gt box coordinate {v} outside [0,1]")));
            }
        }
        if task == Task::Pose {
            let (Some(kp), Some(vis), Some(scales)) =
                (&self.keypoints, &self.visibility, &self.scales)
            else {
                return Err(Error::Contract(
                    "pose ground truth needs keypoints, visibility, and scales".into(),
                ));
            };
            let k = kp.shape().get(1).copied().unwrap_or(0);
            if kp.shape() != [g, k, 2] || vis.shape() != [g, k] || scales.len() != g {
                return Err(Error::shape(format!(
                    "pose gt shapes: keypoints {:?}, visibility {:?}, {} scales for {g} gts",
                    kp.shape(),
                    vis.shape(),
                    scales.len()
                )));
            }
            for &v in vis.data() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::input(format!("visibility must be 0/1, got {v}")));
                }
            }
            for &s in scales {
                if s <= 0.0 {
                    return Err(Error::input(format!("person scale must be positive, got {s}")));
                }
            }
        }
        if task == Task::InstanceSegment {
            let Some(m) = &self.masks else {
                return Err(Error::Contract("segmentation ground truth needs masks".into()));
            };
            if m.shape().len() != 3 || m.shape()[0] != g {
                return Err(Error::shape(format!("gt masks: {:?} for {g} gts", m.shape())));
            }
            for &v in m.data() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::input(format!("gt masks must be binary, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// One decoder layer's predictions for one image.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// `[N, classes]` logits (pose: classes = 1).
    pub logits: Tensor,
    /// `[N, 4]` normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// `[N, K, 2]` normalized positions (pose only).
    pub keypoints: Option<Tensor>,
    /// `[N, K]` keypoint confidence logits (pose only).
    pub kpt_logits: Option<Tensor>,
    /// `[N, Hm, Wm]` mask logits (segmentation only).
    pub masks: Option<Tensor>,
}

impl PredictionSet {
    pub fn num_queries(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        let n = self.num_queries();
        if self.boxes.shape() != [n, 4] {
            return Err(Error::shape(format!(
                "prediction boxes: {:?} for {n} queries",
                self.boxes.shape()
            )));
        }
        match task {
            Task::Detect => {}
            Task::Pose => {
                let (Some(kp), Some(kl)) = (&self.keypoints, &self.kpt_logits) else {
                    return Err(Error::Contract("pose predictions need keypoints".into()));
                };
                let k = kp.shape().get(1).copied().unwrap_or(0);
                if kp.shape() != [n, k, 2] || kl.shape() != [n, k] {
                    return Err(Error::shape(format!(
                        "pose prediction shapes: keypoints {:?}, scores {:?}",
                        kp.shape(),
                        kl.shape()
                    )));
                }
            }
            Task::InstanceSegment => {
                if self.masks.is_none() {
                    return Err(Error::Contract("segmentation predictions need masks".into()));
                }
            }
        }
        Ok(())
    }
}

/// `(cx, cy, w, h)` to `(x1, y1, x2, y2)` in f64.
pub fn cxcywh_to_xyxy(b: &[f32]) -> [f64; 4] {
    let (cx, cy, w, h) = (b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn check_box(b: &[f64; 4], which: &str) -> Result<()> {
    if b[2] < b[0] || b[3] < b[1] {
        return Err(Error::input(format!(
            "{which} box is inverted: [{}, {}, {}, {}]",
            b[0], b[1], b[2], b[3]
        )));
    }
    Ok(())
}

/// Plain intersection-over-union of two corner-form boxes.
pub fn iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    check_box(a, "first")?;
    check_box(b, "second")?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        return Ok(if inter > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(inter / union)
}

/// Generalized IoU of two corner-form boxes: IoU minus the fraction of the
/// smallest enclosing box not covered by the union. Range (−1, 1].
pub fn giou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    check_box(a, "first")?;
    check_box(b, "second")?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull <= 0.0 {
        // Both boxes are the same point.
        return Ok(1.0);
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    Ok(iou - (hull - union) / hull)
}

/// GIoU loss `1 − GIoU(a, b)` with its analytic gradient with respect to
/// the four coordinates of `a`.
pub fn giou_loss_grad(a: &[f64; 4], b: &[f64; 4]) -> Result<(f64, [f64; 4])> {
    check_box(a, "first")?;
    check_box(b, "second")?;
    let ix1 = a[0].max(b[0]);
    let iy1 = a[1].max(b[1]);
    let ix2 = a[2].min(b[2]);
    let iy2 = a[3].min(b[3]);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let (aw, ah) = (a[2] - a[0], a[3] - a[1]);
    let area_a = aw * ah;
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let hw = a[2].max(b[2]) - a[0].min(b[0]);
    let hh = a[3].max(b[3]) - a[1].min(b[1]);
    let hull = hw * hh;
    if union <= 0.0 || hull <= 0.0 {
        return Err(Error::input(
            "GIoU gradient undefined for zero-area union or hull",
        ));
    }

    let overlapping = iw > 0.0 && ih > 0.0;
    // d inter / d a, active only where a's edge is the binding one.
    let d_inter = [
        if overlapping && a[0] >= b[0] { -ih } else { 0.0 },
        if overlapping && a[1] >= b[1] { -iw } else { 0.0 },
        if overlapping && a[2] <= b[2] { ih } else { 0.0 },
        if overlapping && a[3] <= b[3] { iw } else { 0.0 },
    ];
    let d_area = [-ah, -aw, ah, aw];
    let d_hull = [
        if a[0] <= b[0] { -hh } else { 0.0 },
        if a[1] <= b[1] { -hw } else { 0.0 },
        if a[2] >= b[2] { hh } else { 0.0 },
        if a[3] >= b[3] { hw } else { 0.0 },
    ];
    // giou = inter/union + union/hull − 1
    let loss = 1.0 - (inter / union + union / hull - 1.0);
    let mut grad = [0.0f64; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        let d_giou = (d_inter[i] * union - inter * d_union) / (union * union)
            + (d_union * hull - union * d_hull[i]) / (hull * hull);
        grad[i] = -d_giou;
    }
    Ok((loss, grad))
}

/// L1 distance between two center-form boxes (sum over 4 coordinates).
pub fn l1_box(pred: &[f32], gt: &[f32]) -> f64 {
    pred.iter()
        .zip(gt)
        .take(4)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum()
}

/// Keypoint similarity constants for the 17 standard human keypoints
/// (2x the per-keypoint sigma used by the COCO evaluator).
pub fn coco_keypoint_kappas() -> Vec<f64> {
    const SIGMAS: [f64; 17] = [
        0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
        0.107, 0.087, 0.087, 0.089, 0.089,
    ];
    SIGMAS.iter().map(|s| 2.0 * s).collect()
}

/// Object keypoint similarity: Gaussian score of per-keypoint error
/// normalized by person scale `s` and per-keypoint constants, averaged over
/// visible keypoints.
pub fn oks(pred: &[f64], gt: &[f64], vis: &[u8], s: f64, kappa: &[f64]) -> Result<f64> {
    let k = vis.len();
    if pred.len() != 2 * k || gt.len() != 2 * k || kappa.len() != k {
        return Err(Error::shape(format!(
            "oks: {} pred coords, {} gt coords, {k} visibilities, {} constants",
            pred.len(),
            gt.len(),
            kappa.len()
        )));
    }
    if s <= 0.0 {
        return Err(Error::input(format!("person scale must be positive, got {s}")));
    }
    let visible: u32 = vis.iter().map(|&v| v as u32).sum();
    if visible == 0 {
        return Err(Error::UndefinedOks);
    }
    let mut acc = 0.0;
    for i in 0..k {
        if vis[i] == 0 {
            continue;
        }
        let dx = pred[2 * i] - gt[2 * i];
        let dy = pred[2 * i + 1] - gt[2 * i + 1];
        acc += (-(dx * dx + dy * dy) / (2.0 * s * s * kappa[i] * kappa[i])).exp();
    }
    Ok(acc / visible as f64)
}

/// OKS loss `1 − OKS` with its analytic gradient with respect to the
/// flattened predicted keypoints `[x0, y0, x1, y1, …]`.
pub fn oks_loss_grad(
    pred: &[f64],
    gt: &[f64],
    vis: &[u8],
    s: f64,
    kappa: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let value = oks(pred, gt, vis, s, kappa)?;
    let visible: f64 = vis.iter().map(|&v| v as f64).sum();
    let mut grad = vec![0.0f64; pred.len()];
    for i in 0..vis.len() {
        if vis[i] == 0 {
            continue;
        }
        let dx = pred[2 * i] - gt[2 * i];
        let dy = pred[2 * i + 1] - gt[2 * i + 1];
        let denom = s * s * kappa[i] * kappa[i];
        let e = (-(dx * dx + dy * dy) / (2.0 * denom)).exp();
        // d(1 − e/V)/dx = e·dx/denom / V
        grad[2 * i] = e * dx / denom / visible;
        grad[2 * i + 1] = e * dy / denom / visible;
    }
    Ok((1.0 - value, grad))
}

/// Visibility-gated keypoint L1: `Σ_k v_k·(|Δx_k| + |Δy_k|)`.
pub fn kpt_l1(pred: &[f64], gt: &[f64], vis: &[u8]) -> Result<f64> {
    if pred.len() != 2 * vis.len() || gt.len() != pred.len() {
        return Err(Error::shape(format!(
            "keypoint l1: {} pred coords, {} gt coords, {} visibilities",
            pred.len(),
            gt.len(),
            vis.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..vis.len() {
        if vis[i] == 0 {
            continue;
        }
        acc += (pred[2 * i] - gt[2 * i]).abs() + (pred[2 * i + 1] - gt[2 * i + 1]).abs();
    }
    Ok(acc)
}

/// Keypoint L1 with its (sign) gradient with respect to predictions.
pub fn kpt_l1_grad(pred: &[f64], gt: &[f64], vis: &[u8]) -> Result<(f64, Vec<f64>)> {
    let loss = kpt_l1(pred, gt, vis)?;
    let mut grad = vec![0.0f64; pred.len()];
    for i in 0..vis.len() {
        if vis[i] == 0 {
            continue;
        }
        grad[2 * i] = (pred[2 * i] - gt[2 * i]).signum();
        grad[2 * i + 1] = (pred[2 * i + 1] - gt[2 * i + 1]).signum();
    }
    Ok((loss, grad))
}

/// Positive target for the varifocal classification loss: `query`'s entry at
/// `class` trains toward the continuous quality `q` (IoU or OKS of the
/// matched pair); every other (query, class) cell is a negative.
#[derive(Clone, Copy, Debug)]
pub struct VflTarget {
    pub query: usize,
    pub class: usize,
    pub quality: f64,
}

const VFL_ALPHA: f64 = 0.75;
const VFL_GAMMA: i32 = 2;

/// Varifocal classification loss over `[N, classes]` logits, normalized by
/// the number of matched queries, with its gradient with respect to logits.
///
/// Positives: `−q·(q·log p + (1−q)·log(1−p))`. Negatives: `−α·p^γ·log(1−p)`.
pub fn vfl_loss_grad(logits: &Tensor, targets: &[VflTarget]) -> Result<(f64, Tensor)> {
    let [n, c] = logits.shape()[..] else {
        return Err(Error::shape(format!("vfl logits: {:?}", logits.shape())));
    };
    let mut positive = vec![None::<(usize, f64)>; n];
    for t in targets {
        if t.query >= n || t.class >= c {
            return Err(Error::input(format!(
                "vfl target (query {}, class {}) outside [{n}, {c}] logits",
                t.query, t.class
            )));
        }
        if !(0.0..=1.0).contains(&t.quality) {
            return Err(Error::input(format!("vfl quality {} outside [0,1]", t.quality)));
        }
        if positive[t.query].replace((t.class, t.quality)).is_some() {
            return Err(Error::input(format!("query {} has two vfl targets", t.query)));
        }
    }
    let norm = (targets.len().max(1)) as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * c];
    for q in 0..n {
        let row = logits.row(q);
        for cl in 0..c {
            let z = row[cl] as f64;
            let p = 1.0 / (1.0 + (-z).exp());
            let is_pos = matches!(positive[q], Some((pc, _)) if pc == cl);
            if is_pos {
                let (_, quality) = positive[q].unwrap();
                let mut term = 0.0;
                if quality > 0.0 {
                    term -= quality * quality * p.max(1e-300).ln();
                }
                if quality < 1.0 {
                    term -= quality * (1.0 - quality) * (1.0 - p).max(1e-300).ln();
                }
                loss += term;
                grad[q * c + cl] = (-(quality * (quality - p)) / norm) as f32;
            } else {
                let one_m_p = (1.0 - p).max(1e-300);
                let pg = p.powi(VFL_GAMMA);
                loss += -VFL_ALPHA * pg * one_m_p.ln();
                // d/dz of −α p^γ log(1−p) = −α(γ·p^γ·(1−p)·log(1−p) − p^(γ+1))
                let d = -VFL_ALPHA
                    * (f64::from(VFL_GAMMA) * pg * (1.0 - p) * one_m_p.ln() - pg * p);
                grad[q * c + cl] = (d / norm) as f32;
            }
        }
    }
    Ok((loss / norm, Tensor::new(&[n, c], grad)?))
}

/// Mean binary cross-entropy between mask logits and a binary target, with
/// gradient with respect to the logits.
pub fn bce_mask_loss_grad(logits: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "bce shapes: {:?} vs {:?}",
            logits.shape(),
            gt.shape()
        )));
    }
    let npix = logits.numel();
    if npix == 0 {
        return Err(Error::input("bce over empty mask"));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; npix];
    for (i, (&z, &g)) in logits.data().iter().zip(gt.data()).enumerate() {
        if g != 0.0 && g != 1.0 {
            return Err(Error::input(format!("bce target must be binary, got {g}")));
        }
        let z = z as f64;
        let g = g as f64;
        let p = 1.0 / (1.0 + (-z).exp());
        loss -= g * p.max(1e-300).ln() + (1.0 - g) * (1.0 - p).max(1e-300).ln();
        grad[i] = ((p - g) / npix as f64) as f32;
    }
    Ok((loss / npix as f64, Tensor::new(logits.shape(), grad)?))
}

/// Dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)` on probabilities, ε = 1, with
/// gradient with respect to the probabilities.
pub fn dice_loss_grad(probs: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    if probs.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "dice shapes: {:?} vs {:?}",
            probs.shape(),
            gt.shape()
        )));
    }
    const EPS: f64 = 1.0;
    let mut num = 0.0f64;
    let mut sum_p = 0.0f64;
    let mut sum_g = 0.0f64;
    for (&p, &g) in probs.data().iter().zip(gt.data()) {
        if g != 0.0 && g != 1.0 {
            return Err(Error::input(format!("dice target must be binary, got {g}")));
        }
        num += 2.0 * p as f64 * g as f64;
        sum_p += p as f64;
        sum_g += g as f64;
    }
    let denom = sum_p + sum_g + EPS;
    let loss = 1.0 - (num + EPS) / denom;
    let mut grad = vec![0.0f32; probs.numel()];
    for (i, &g) in gt.data().iter().enumerate() {
        // d/dp_i of −(num+ε)/denom
        grad[i] = ((-(2.0 * g as f64 * denom - (num + EPS))) / (denom * denom)) as f32;
    }
    Ok((loss, Tensor::new(probs.shape(), grad)?))
}

/// Itemized weighted loss. `total` always equals the sum of `items`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub items: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    fn from_items(items: BTreeMap<String, f64>) -> Self {
        let total = items.values().sum();
        LossReport { items, total }
    }
}

struct TermAccumulator {
    sums: BTreeMap<&'static str, f64>,
    layers: usize,
}

impl TermAccumulator {
    fn new(names: &[&'static str]) -> Self {
        TermAccumulator { sums: names.iter().map(|&n| (n, 0.0)).collect(), layers: 0 }
    }

    fn add_layer(&mut self, values: &[(&'static str, f64)]) {
        for (name, v) in values {
            *self.sums.get_mut(name).expect("registered term") += v;
        }
        self.layers += 1;
    }

    /// Mean over layers, then weighting.
    fn report(self, weights: &[(&'static str, f64)]) -> LossReport {
        let mut items = BTreeMap::new();
        for (name, w) in weights {
            let mean = self.sums[name] / self.layers as f64;
            items.insert((*name).to_string(), w * mean);
        }
        LossReport::from_items(items)
    }
}

fn check_layers_matches(
    layers: &[PredictionSet],
    matches: &[MatchAssignment],
    gt: &GroundTruthSet,
    task: Task,
) -> Result<()> {
    if layers.is_empty() || layers.len() != matches.len() {
        return Err(Error::Contract(format!(
            "{} prediction layers with {} match sets",
            layers.len(),
            matches.len()
        )));
    }
    gt.validate(task)?;
    for (p, m) in layers.iter().zip(matches) {
        p.validate(task)?;
        if m.pairs.len() != gt.len() {
            return Err(Error::Contract(format!(
                "match covers {} ground truths, image has {}",
                m.pairs.len(),
                gt.len()
            )));
        }
        for &(g, q) in &m.pairs {
            if g >= gt.len() || q >= p.num_queries() {
                return Err(Error::Contract(format!("match pair ({g}, {q}) out of range")));
            }
        }
    }
    Ok(())
}

/// Detection loss: varifocal classification (quality = IoU of the matched
/// pair), L1 and GIoU box regression, plus zero-valued refinement hooks.
/// Terms are averaged over decoder layers; classification normalizes by
/// matched-query count, box terms by ground-truth count.
pub fn total_det_loss(
    layers: &[PredictionSet],
    gt: &GroundTruthSet,
    matches: &[MatchAssignment],
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    check_layers_matches(layers, matches, gt, Task::Detect)?;
    let g_norm = gt.len().max(1) as f64;
    let mut acc = TermAccumulator::new(&["cls", "l1", "giou", "ddf", "fgl"]);
    for (pred, m) in layers.iter().zip(matches) {
        let mut targets = Vec::with_capacity(m.pairs.len());
        let mut l1_sum = 0.0;
        let mut giou_sum = 0.0;
        for &(gi, qi) in &m.pairs {
            let pb = cxcywh_to_xyxy(pred.boxes.row(qi));
            let gb = cxcywh_to_xyxy(gt.boxes.row(gi));
            let quality = iou_xyxy(&pb, &gb)?;
            targets.push(VflTarget { query: qi, class: gt.classes[gi], quality });
            l1_sum += l1_box(pred.boxes.row(qi), gt.boxes.row(gi));
            giou_sum += 1.0 - giou_xyxy(&pb, &gb)?;
        }
        let (cls, _) = vfl_loss_grad(&pred.logits, &targets)?;
        acc.add_layer(&[
            ("cls", cls),
            ("l1", l1_sum / g_norm),
            ("giou", giou_sum / g_norm),
            ("ddf", 0.0),
            ("fgl", 0.0),
        ]);
    }
    Ok(acc.report(&[
        ("cls", w.lambda_cls),
        ("l1", w.lambda_l1),
        ("giou", w.lambda_giou),
        ("ddf", w.lambda_ddf),
        ("fgl", w.lambda_fgl),
    ]))
}

/// Pose loss: varifocal person classification (quality = OKS of the matched
/// pair), visibility-gated keypoint L1, and OKS loss.
pub fn total_pose_loss(
    layers: &[PredictionSet],
    gt: &GroundTruthSet,
    matches: &[MatchAssignment],
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    check_layers_matches(layers, matches, gt, Task::Pose)?;
    let g_norm = gt.len().max(1) as f64;
    let kappa = coco_keypoint_kappas_for(gt)?;
    let mut acc = TermAccumulator::new(&["cls", "kpt", "oks"]);
    for (pred, m) in layers.iter().zip(matches) {
        let mut targets = Vec::with_capacity(m.pairs.len());
        let mut kpt_sum = 0.0;
        let mut oks_sum = 0.0;
        for &(gi, qi) in &m.pairs {
            let (pk, gk, vis, s) = keypoint_pair(pred, gt, qi, gi)?;
            let value = oks(&pk, &gk, &vis, s, &kappa)?;
            targets.push(VflTarget { query: qi, class: 0, quality: value });
            kpt_sum += kpt_l1(&pk, &gk, &vis)?;
            oks_sum += 1.0 - value;
        }
        let (cls, _) = vfl_loss_grad(&pred.logits, &targets)?;
        acc.add_layer(&[("cls", cls), ("kpt", kpt_sum / g_norm), ("oks", oks_sum / g_norm)]);
    }
    Ok(acc.report(&[
        ("cls", w.lambda_cls),
        ("kpt", w.lambda_kpt),
        ("oks", w.lambda_oks),
    ]))
}

/// Segmentation loss: the detection terms plus mask BCE and Dice on the
/// stride-4 grid.
pub fn total_insseg_loss(
    layers: &[PredictionSet],
    gt: &GroundTruthSet,
    matches: &[MatchAssignment],
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    check_layers_matches(layers, matches, gt, Task::InstanceSegment)?;
    let g_norm = gt.len().max(1) as f64;
    let mut acc = TermAccumulator::new(&["cls", "l1", "giou", "mask", "dice"]);
    for (pred, m) in layers.iter().zip(matches) {
        let mut targets = Vec::with_capacity(m.pairs.len());
        let mut l1_sum = 0.0;
        let mut giou_sum = 0.0;
        let mut mask_sum = 0.0;
        let mut dice_sum = 0.0;
        for &(gi, qi) in &m.pairs {
            let pb = cxcywh_to_xyxy(pred.boxes.row(qi));
            let gb = cxcywh_to_xyxy(gt.boxes.row(gi));
            let quality = iou_xyxy(&pb, &gb)?;
            targets.push(VflTarget { query: qi, class: gt.classes[gi], quality });
            l1_sum += l1_box(pred.boxes.row(qi), gt.boxes.row(gi));
            giou_sum += 1.0 - giou_xyxy(&pb, &gb)?;
            let (pm, gm) = mask_pair(pred, gt, qi, gi)?;
            mask_sum += bce_mask_loss_grad(&pm, &gm)?.0;
            dice_sum += dice_loss_grad(&pm.map(crate::ops::sigmoid), &gm)?.0;
        }
        let (cls, _) = vfl_loss_grad(&pred.logits, &targets)?;
        acc.add_layer(&[
            ("cls", cls),
            ("l1", l1_sum / g_norm),
            ("giou", giou_sum / g_norm),
            ("mask", mask_sum / g_norm),
            ("dice", dice_sum / g_norm),
        ]);
    }
    Ok(acc.report(&[
        ("cls", w.lambda_cls),
        ("l1", w.lambda_l1),
        ("giou", w.lambda_giou),
        ("mask", w.lambda_mask),
        ("dice", w.lambda_dice),
    ]))
}

/// Keypoint constants sized to the gt's keypoint count: the 17 standard
/// values when K = 17, otherwise a uniform 0.1.
fn coco_keypoint_kappas_for(gt: &GroundTruthSet) -> Result<Vec<f64>> {
    let k = gt
        .keypoints
        .as_ref()
        .ok_or_else(|| Error::Contract("pose ground truth needs keypoints".into()))?
        .shape()[1];
    Ok(if k == 17 { coco_keypoint_kappas() } else { vec![0.1; k] })
}

/// Extracts (pred keypoints, gt keypoints, visibility, scale) for one
/// matched pair as flat f64 buffers.
pub(crate) fn keypoint_pair(
    pred: &PredictionSet,
    gt: &GroundTruthSet,
    qi: usize,
    gi: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<u8>, f64)> {
    let pk = pred.keypoints.as_ref().ok_or_else(|| Error::Contract("missing keypoints".into()))?;
    let gk = gt.keypoints.as_ref().ok_or_else(|| Error::Contract("missing keypoints".into()))?;
    let vis = gt.visibility.as_ref().ok_or_else(|| Error::Contract("missing visibility".into()))?;
    let scales = gt.scales.as_ref().ok_or_else(|| Error::Contract("missing scales".into()))?;
    let k = gk.shape()[1];
    let pk_flat: Vec<f64> =
        (0..2 * k).map(|i| pk.data()[(qi * k * 2) + i] as f64).collect();
    let gk_flat: Vec<f64> =
        (0..2 * k).map(|i| gk.data()[(gi * k * 2) + i] as f64).collect();
    let v: Vec<u8> = (0..k).map(|i| vis.data()[gi * k + i] as u8).collect();
    Ok((pk_flat, gk_flat, v, scales[gi] as f64))
}

/// Extracts (pred mask logits, gt mask) for one matched pair.
pub(crate) fn mask_pair(
    pred: &PredictionSet,
    gt: &GroundTruthSet,
    qi: usize,
    gi: usize,
) -> Result<(Tensor, Tensor)> {
    let pm = pred.masks.as_ref().ok_or_else(|| Error::Contract("missing predicted masks".into()))?;
    let gm = gt.masks.as_ref().ok_or_else(|| Error::Contract("missing gt masks".into()))?;
    let [_, ph, pw] = pm.shape()[..] else {
        return Err(Error::shape(format!("pred masks: {:?}", pm.shape())));
    };
    let [_, gh, gw] = gm.shape()[..] else {
        return Err(Error::shape(format!("gt masks: {:?}", gm.shape())));
    };
    if (ph, pw) != (gh, gw) {
        return Err(Error::shape(format!("mask grids differ: {ph}x{pw} vs {gh}x{gw}")));
    }
    let np = ph * pw;
    let pd = &pm.data()[qi * np..(qi + 1) * np];
    let gd = &gm.data()[gi * np..(gi + 1) * np];
    Ok((
        Tensor::new(&[ph, pw], pd.to_vec())?,
        Tensor::new(&[gh, gw], gd.to_vec())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn giou_hand_cases() {
        // overlap: inter 1, union 7, hull 9
        let v = giou_xyxy(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_abs_diff_eq!(v, 1.0 / 7.0 - 2.0 / 9.0, epsilon = 1e-12);
        // disjoint: iou 0, hull 9, union 2
        let v = giou_xyxy(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]).unwrap();
        assert_abs_diff_eq!(v, -7.0 / 9.0, epsilon = 1e-12);
        // identity
        let v = giou_xyxy(&[0.1, 0.2, 0.5, 0.9], &[0.1, 0.2, 0.5, 0.9]).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_rejects_inverted_box() {
        assert!(giou_xyxy(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn giou_translation_invariance() {
        let a = [0.0, 0.0, 2.0, 2.0];
        let b = [1.0, 1.0, 3.0, 3.0];
        let (l1, _) = giou_loss_grad(&a, &b).unwrap();
        let shift = 0.37;
        let a2 = [a[0] + shift, a[1] + shift, a[2] + shift, a[3] + shift];
        let b2 = [b[0] + shift, b[1] + shift, b[2] + shift, b[3] + shift];
        let (l2, _) = giou_loss_grad(&a2, &b2).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
    }

    #[test]
    fn oks_single_keypoint_at_one_kappa_scale() {
        // d = s·κ ⇒ exp(−1/2)
        let kappa = vec![0.2];
        let s = 0.5;
        let d = s * kappa[0];
        let v = oks(&[0.3 + d, 0.4], &[0.3, 0.4], &[1], s, &kappa).unwrap();
        assert_abs_diff_eq!(v, (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn oks_errors() {
        assert!(matches!(
            oks(&[0.0, 0.0], &[0.0, 0.0], &[0], 1.0, &[0.1]),
            Err(Error::UndefinedOks)
        ));
        assert!(oks(&[0.0, 0.0], &[0.0, 0.0], &[1], 0.0, &[0.1]).is_err());
    }

    #[test]
    fn oks_scale_invariance() {
        let pred = [0.2, 0.3, 0.6, 0.7];
        let gt = [0.25, 0.35, 0.55, 0.65];
        let vis = [1u8, 1];
        let kappa = vec![0.1, 0.2];
        let a = oks(&pred, &gt, &vis, 0.4, &kappa).unwrap();
        let half = |v: &[f64]| v.iter().map(|x| x / 2.0).collect::<Vec<_>>();
        let b = oks(&half(&pred), &half(&gt), &vis, 0.2, &kappa).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn kpt_l1_ignores_invisible() {
        let loss = kpt_l1(&[0.5, 0.5, 9.0, 9.0], &[0.4, 0.7, 0.0, 0.0], &[1, 0]).unwrap();
        assert_abs_diff_eq!(loss, 0.1 + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn vfl_hand_case_single_positive() {
        // One query, one class, q = 0.5, logit 0 (p = 0.5):
        // pos = −0.5·(0.5·ln 0.5 + 0.5·ln 0.5) = −0.5·ln 0.5; normalized by 1.
        let logits = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let (loss, _) =
            vfl_loss_grad(&logits, &[VflTarget { query: 0, class: 0, quality: 0.5 }]).unwrap();
        assert_abs_diff_eq!(loss, -0.5 * 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn vfl_perfect_positive_and_empty_negative_vanish() {
        let logits = Tensor::new(&[2, 1], vec![40.0, -40.0]).unwrap();
        let (loss, _) =
            vfl_loss_grad(&logits, &[VflTarget { query: 0, class: 0, quality: 1.0 }]).unwrap();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (l, _) = dice_loss_grad(&a, &a).unwrap();
        // ε = 1 keeps it near 0: 1 − (4+1)/(4+1) = 0
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
        let b = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let (l, _) = dice_loss_grad(&a, &b).unwrap();
        // 1 − (0+1)/(4+1) = 0.8, approaching 1 as masks grow
        assert_abs_diff_eq!(l, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn bce_mean_hand_value() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let gt = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (l, _) = bce_mask_loss_grad(&logits, &gt).unwrap();
        assert_abs_diff_eq!(l, -(0.5f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn weights_scale_single_item_linearly() {
        let gt = GroundTruthSet {
            boxes: Tensor::new(&[1, 4], vec![0.5, 0.5, 0.4, 0.4]).unwrap(),
            classes: vec![2],
            keypoints: None,
            visibility: None,
            scales: None,
            masks: None,
        };
        let pred = PredictionSet {
            logits: Tensor::new(&[3, 4], vec![-3.0; 12]).unwrap(),
            boxes: Tensor::new(
                &[3, 4],
                vec![0.5, 0.5, 0.3, 0.5, 0.2, 0.2, 0.1, 0.1, 0.8, 0.8, 0.1, 0.1],
            )
            .unwrap(),
            keypoints: None,
            kpt_logits: None,
            masks: None,
        };
        let m = MatchAssignment { pairs: vec![(0, 0)], total_cost: 0.0 };
        let mut w = LossWeights::detect_default();
        let r1 = total_det_loss(&[pred.clone()], &gt, std::slice::from_ref(&m), &w).unwrap();
        w.lambda_giou *= 2.0;
        let r2 = total_det_loss(&[pred], &gt, &[m], &w).unwrap();
        assert_abs_diff_eq!(r2.items["giou"], 2.0 * r1.items["giou"], epsilon = 1e-12);
        assert_abs_diff_eq!(r2.items["cls"], r1.items["cls"], epsilon = 1e-12);
        assert_abs_diff_eq!(r2.items["l1"], r1.items["l1"], epsilon = 1e-12);
    }

    #[test]
    fn report_total_is_sum_of_items() {
        let mut items = BTreeMap::new();
        items.insert("a".to_string(), 0.25);
        items.insert("b".to_string(), 1.5);
        let r = LossReport::from_items(items);
        assert_abs_diff_eq!(r.total, 1.75, epsilon = 1e-12);
    }
}
