//! Seeded synthetic scenes: random boxes, keypoints, and rectangular masks
//! in normalized coordinates, plus random prediction sets. These stand in
//! for dataset annotations everywhere a demo or check needs labeled input.

use crate::error::Result;
use crate::losses::{GroundTruthSet, PredictionSet, Task};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const MIN_BOX_SIDE: f32 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub task: Task,
    pub num_gt: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub num_keypoints: usize,
    /// Stride-4 mask grid (rows, cols); used by segmentation only.
    pub mask_grid: (usize, usize),
}

impl SceneConfig {
    pub fn new(task: Task, num_gt: usize, num_queries: usize) -> Self {
        SceneConfig {
            task,
            num_gt,
            num_queries,
            num_classes: if task == Task::Pose { 1 } else { 80 },
            num_keypoints: if task == Task::Pose { 17 } else { 0 },
            mask_grid: (24, 24),
        }
    }
}

/// One uniformly random box in `[0,1]²` as `(cx, cy, w, h)`, sides at
/// least [`MIN_BOX_SIDE`], fully inside the image.
pub fn random_box(rng: &mut ChaCha8Rng) -> [f32; 4] {
    let axis = |rng: &mut ChaCha8Rng| {
        let a: f32 = rng.gen_range(0.0..=1.0);
        let b: f32 = rng.gen_range(0.0..=1.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let side = (hi - lo).max(MIN_BOX_SIDE).min(1.0);
        let center = ((lo + hi) / 2.0).clamp(side / 2.0, 1.0 - side / 2.0);
        (center, side)
    };
    let (cx, w) = axis(rng);
    let (cy, h) = axis(rng);
    [cx, cy, w, h]
}

/// Rasterizes an axis-aligned rectangle (xyxy, normalized) onto a binary
/// grid: each cell takes the fraction of its area covered by the rectangle
/// and thresholds at 0.5.
pub fn rasterize_rect(rect: [f32; 4], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let cy0 = r as f32 / rows as f32;
        let cy1 = (r + 1) as f32 / rows as f32;
        let oy = (rect[3].min(cy1) - rect[1].max(cy0)).max(0.0);
        for c in 0..cols {
            let cx0 = c as f32 / cols as f32;
            let cx1 = (c + 1) as f32 / cols as f32;
            let ox = (rect[2].min(cx1) - rect[0].max(cx0)).max(0.0);
            let coverage = (ox * oy) / ((cx1 - cx0) * (cy1 - cy0));
            if coverage >= 0.5 {
                out[r * cols + c] = 1.0;
            }
        }
    }
    out
}

/// Random labeled scene for the configured task.
pub fn random_ground_truth(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Result<GroundTruthSet> {
    let g = cfg.num_gt;
    let mut boxes = Vec::with_capacity(g * 4);
    let mut classes = Vec::with_capacity(g);
    let mut kpts = Vec::new();
    let mut vis = Vec::new();
    let mut scales = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..g {
        let b = random_box(rng);
        boxes.extend_from_slice(&b);
        classes.push(rng.gen_range(0..cfg.num_classes));
        match cfg.task {
            Task::Pose => {
                let mut any = false;
                let base = vis.len();
                for _ in 0..cfg.num_keypoints {
                    // Keypoints live inside the instance box.
                    kpts.push(b[0] - b[2] / 2.0 + rng.gen_range(0.0..=1.0) * b[2]);
                    kpts.push(b[1] - b[3] / 2.0 + rng.gen_range(0.0..=1.0) * b[3]);
                    let v = rng.gen_bool(0.8);
                    any |= v;
                    vis.push(v as u8);
                }
                if !any {
                    vis[base + rng.gen_range(0..cfg.num_keypoints)] = 1;
                }
                scales.push((b[2] * b[3]).sqrt().max(0.05));
            }
            Task::InstanceSegment => {
                let rect =
                    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0];
                masks.extend(rasterize_rect(rect, cfg.mask_grid.0, cfg.mask_grid.1));
            }
            Task::Detect => {}
        }
    }
    let gt = GroundTruthSet {
        boxes: Tensor::new(&[g, 4], boxes)?,
        classes,
        keypoints: (cfg.task == Task::Pose)
            .then(|| Tensor::new(&[g, cfg.num_keypoints, 2], kpts))
            .transpose()?,
        visibility: (cfg.task == Task::Pose)
            .then(|| Tensor::new(&[g, cfg.num_keypoints], vis.iter().map(|&v| v as f32).collect()))
            .transpose()?,
        scales: (cfg.task == Task::Pose).then_some(scales),
        masks: (cfg.task == Task::InstanceSegment)
            .then(|| Tensor::new(&[g, cfg.mask_grid.0, cfg.mask_grid.1], masks))
            .transpose()?,
    };
    gt.validate(cfg.task)?;
    Ok(gt)
}

/// Random (untrained-model-like) predictions for the configured task.
pub fn random_predictions(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Result<PredictionSet> {
    let n = cfg.num_queries;
    let logits: Vec<f32> = (0..n * cfg.num_classes).map(|_| rng.gen_range(-4.0..=4.0)).collect();
    let mut boxes = Vec::with_capacity(n * 4);
    for _ in 0..n {
        boxes.extend_from_slice(&random_box(rng));
    }
    let pred = PredictionSet {
        logits: Tensor::new(&[n, cfg.num_classes], logits)?,
        boxes: Tensor::new(&[n, 4], boxes)?,
        keypoints: (cfg.task == Task::Pose)
            .then(|| {
                let data =
                    (0..n * cfg.num_keypoints * 2).map(|_| rng.gen_range(0.0..=1.0)).collect();
                Tensor::new(&[n, cfg.num_keypoints, 2], data)
            })
            .transpose()?,
        kpt_logits: (cfg.task == Task::Pose)
            .then(|| {
                let data = (0..n * cfg.num_keypoints).map(|_| rng.gen_range(-4.0..=4.0)).collect();
                Tensor::new(&[n, cfg.num_keypoints], data)
            })
            .transpose()?,
        masks: (cfg.task == Task::InstanceSegment)
            .then(|| {
                let data = (0..n * cfg.mask_grid.0 * cfg.mask_grid.1)
                    .map(|_| rng.gen_range(-4.0..=4.0))
                    .collect();
                Tensor::new(&[n, cfg.mask_grid.0, cfg.mask_grid.1], data)
            })
            .transpose()?,
    };
    pred.validate(cfg.task)?;
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn boxes_respect_bounds_and_minimum_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let [cx, cy, w, h] = random_box(&mut rng);
            assert!(w >= MIN_BOX_SIDE && h >= MIN_BOX_SIDE);
            assert!(cx - w / 2.0 >= -1e-6 && cx + w / 2.0 <= 1.0 + 1e-6);
            assert!(cy - h / 2.0 >= -1e-6 && cy + h / 2.0 <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn every_pose_instance_has_a_visible_keypoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SceneConfig::new(Task::Pose, 6, 10);
        for _ in 0..50 {
            let gt = random_ground_truth(&mut rng, &cfg).unwrap();
            let vis = gt.visibility.as_ref().unwrap();
            for g in 0..6 {
                let visible: f32 = vis.row(g).iter().sum();
                assert!(visible >= 1.0);
            }
        }
    }

    #[test]
    fn keypoints_lie_inside_their_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SceneConfig::new(Task::Pose, 4, 10);
        let gt = random_ground_truth(&mut rng, &cfg).unwrap();
        let kp = gt.keypoints.as_ref().unwrap();
        for g in 0..4 {
            let b = gt.boxes.row(g);
            for k in 0..17 {
                let x = kp.at3(g, k, 0);
                let y = kp.at3(g, k, 1);
                assert!(x >= b[0] - b[2] / 2.0 - 1e-6 && x <= b[0] + b[2] / 2.0 + 1e-6);
                assert!(y >= b[1] - b[3] / 2.0 - 1e-6 && y <= b[1] + b[3] / 2.0 + 1e-6);
            }
        }
    }

    #[test]
    fn full_coverage_cell_is_set_and_masks_are_binary() {
        // Rectangle covering the left half: column 0 fully covered,
        // column 1 empty on a 2×2 grid.
        let m = rasterize_rect([0.0, 0.0, 0.5, 1.0], 2, 2);
        assert_eq!(m, vec![1.0, 0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SceneConfig::new(Task::InstanceSegment, 5, 9);
        let gt = random_ground_truth(&mut rng, &cfg).unwrap();
        assert!(gt.masks.unwrap().data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn half_coverage_threshold_behaviour() {
        // Rectangle covering exactly half of each cell in row 0.
        let m = rasterize_rect([0.0, 0.0, 1.0, 0.25], 2, 2);
        assert_eq!(&m[..2], &[1.0, 1.0]);
        assert_eq!(&m[2..], &[0.0, 0.0]);
    }

    #[test]
    fn predictions_validate_for_every_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for task in [Task::Detect, Task::Pose, Task::InstanceSegment] {
            let cfg = SceneConfig::new(task, 3, 7);
            random_predictions(&mut rng, &cfg).unwrap();
            random_ground_truth(&mut rng, &cfg).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SceneConfig::new(Task::Detect, 5, 7);
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let ga = random_ground_truth(&mut a, &cfg).unwrap();
        let gb = random_ground_truth(&mut b, &cfg).unwrap();
        assert_eq!(ga.boxes.data(), gb.boxes.data());
        assert_eq!(ga.classes, gb.classes);
    }
}
