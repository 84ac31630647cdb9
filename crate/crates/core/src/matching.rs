//! Bipartite matching between ground truths and queries.
//!
//! [`hungarian`] is a Kuhn–Munkres solver with potentials (shortest
//! augmenting paths, O(G²N) on the rectangular matrix) refined to a
//! deterministic tie-break: among all minimum-cost assignments it returns
//! the one whose (gt, query) pair sequence is lexicographically smallest.
//! [`brute_force_match`] enumerates every injective assignment for small G
//! under the same tie-break and serves as the oracle.

use crate::error::{Error, Result};
use crate::losses::{
    cxcywh_to_xyxy, giou_xyxy, keypoint_pair, l1_box, mask_pair, oks, GroundTruthSet, LossWeights,
    PredictionSet, Task,
};
use crate::ops::sigmoid;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Validated `[G, N]` cost matrix with G ≤ N and finite entries.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    values: Tensor,
}

impl CostMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let [g, n] = values.shape()[..] else {
            return Err(Error::shape(format!("cost matrix: {:?}", values.shape())));
        };
        if g > n {
            return Err(Error::input(format!(
                "{g} ground truths exceed {n} queries; every gt needs a distinct query"
            )));
        }
        // Tensor construction already rejects non-finite values.
        Ok(CostMatrix { values })
    }

    pub fn num_gt(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_queries(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, g: usize, q: usize) -> f64 {
        self.values.row(g)[q] as f64
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// An injective assignment of every ground truth to a query. `pairs` is
/// sorted by gt index; `total_cost` is the f64 sum in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Relative tolerance for "same total cost" during tie-break refinement.
const TIE_EPS: f64 = 1e-9;

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_EPS * a.abs().max(b.abs()).max(1.0)
}

/// Minimum total cost of assigning rows `rows` to distinct columns `cols`
/// (indices into the full matrix), by Kuhn–Munkres with potentials.
fn km_min_cost(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let g = rows.len();
    let n = cols.len();
    if g == 0 {
        return 0.0;
    }
    debug_assert!(g <= n);
    // 1-indexed arrays with column 0 as the virtual start of each phase.
    let mut u = vec![0.0f64; g + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // matched[j] = row occupying column j (1-indexed, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=g {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let row = rows[i0 - 1];
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(row, cols[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        // Augment along the recorded path.
        while j0 != 0 {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
        }
    }
    let mut per_row = vec![usize::MAX; g];
    for j in 1..=n {
        if matched[j] != 0 {
            per_row[matched[j] - 1] = cols[j - 1];
        }
    }
    let mut total = 0.0f64;
    for (ri, &row) in rows.iter().enumerate() {
        total += cost.at(row, per_row[ri]);
    }
    total
}

/// Globally minimum-cost assignment with the lexicographic tie-break.
///
/// After solving for the optimal total, the pair sequence is rebuilt gt by
/// gt: each gt takes the smallest query index that still admits a completion
/// at the optimal total. This realizes "lexicographically smallest pair
/// sequence" exactly, at the price of O(G·N) extra solver calls.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchAssignment> {
    let g = cost.num_gt();
    let n = cost.num_queries();
    if g == 0 {
        return Ok(MatchAssignment { pairs: vec![], total_cost: 0.0 });
    }
    let all_rows: Vec<usize> = (0..g).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let optimum = km_min_cost(cost, &all_rows, &all_cols);

    let mut remaining: Vec<usize> = all_cols;
    let mut pairs = Vec::with_capacity(g);
    let mut prefix = 0.0f64;
    for gi in 0..g {
        let tail_rows: Vec<usize> = (gi + 1..g).collect();
        let mut chosen: Option<usize> = None;
        let mut best_fallback = (f64::INFINITY, 0usize);
        for (pos, &q) in remaining.iter().enumerate() {
            let mut rest = remaining.clone();
            rest.remove(pos);
            let cand = prefix + cost.at(gi, q) + km_min_cost(cost, &tail_rows, &rest);
            if approx_eq(cand, optimum) {
                chosen = Some(pos);
                break;
            }
            if cand < best_fallback.0 {
                best_fallback = (cand, pos);
            }
        }
        // Floating-point safety net; unreachable when arithmetic is exact.
        let pos = chosen.unwrap_or(best_fallback.1);
        let q = remaining.remove(pos);
        prefix += cost.at(gi, q);
        pairs.push((gi, q));
    }
    Ok(MatchAssignment { pairs, total_cost: prefix })
}

/// Exhaustive assignment oracle: enumerates injective query choices in
/// lexicographic order, keeping the first strict minimum. G ≤ 8 only.
pub fn brute_force_match(cost: &CostMatrix) -> Result<MatchAssignment> {
    let g = cost.num_gt();
    let n = cost.num_queries();
    if g > 8 {
        return Err(Error::Size(format!(
            "brute-force enumeration supports at most 8 ground truths, got {g}"
        )));
    }
    if g == 0 {
        return Ok(MatchAssignment { pairs: vec![], total_cost: 0.0 });
    }
    let mut used = vec![false; n];
    let mut current = Vec::with_capacity(g);
    let mut best: Option<(f64, Vec<usize>)> = None;
    enumerate(cost, 0, g, &mut used, &mut current, 0.0, &mut best);
    let (total, qs) = best.expect("at least one assignment exists when G <= N");
    Ok(MatchAssignment {
        pairs: qs.iter().copied().enumerate().collect(),
        total_cost: total,
    })
}

fn enumerate(
    cost: &CostMatrix,
    gi: usize,
    g: usize,
    used: &mut [bool],
    current: &mut Vec<usize>,
    acc: f64,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if gi == g {
        // Strict improvement only: the first (lexicographically smallest)
        // sequence reaching the minimum wins.
        if best.as_ref().is_none_or(|(b, _)| acc < *b) {
            *best = Some((acc, current.clone()));
        }
        return;
    }
    for q in 0..used.len() {
        if used[q] {
            continue;
        }
        used[q] = true;
        current.push(q);
        enumerate(cost, gi + 1, g, used, current, acc + cost.at(gi, q), best);
        current.pop();
        used[q] = false;
    }
}

/// Builds the task-specific matching cost between every (gt, query) pair,
/// reusing the training-loss weights:
/// - detect: `λ_cls·(−p(class)) + λ_l1·‖Δb‖₁ + λ_giou·(1 − GIoU)`
/// - pose: `λ_cls·(−p) + λ_oks·(1 − OKS)`
/// - segmentation: the detect cost plus `λ_mask·BCE + λ_dice·(1 − Dice)`
///   on the stride-4 mask grid.
pub fn build_cost_matrix(
    pred: &PredictionSet,
    gt: &GroundTruthSet,
    weights: &LossWeights,
    task: Task,
) -> Result<CostMatrix> {
    weights.validate()?;
    pred.validate(task)?;
    gt.validate(task)?;
    let g = gt.len();
    let n = pred.num_queries();
    if g > n {
        return Err(Error::input(format!("{g} ground truths exceed {n} queries")));
    }
    let classes = pred.logits.shape()[1];
    let kappa = if task == Task::Pose {
        let k = gt.keypoints.as_ref().map(|t| t.shape()[1]).unwrap_or(0);
        if k == 17 { crate::losses::coco_keypoint_kappas() } else { vec![0.1; k] }
    } else {
        vec![]
    };

    let mut vals = vec![0.0f32; g * n];
    for gi in 0..g {
        let gb = cxcywh_to_xyxy(gt.boxes.row(gi));
        let class = gt.classes[gi];
        if class >= classes {
            return Err(Error::input(format!(
                "gt class {class} outside the {classes}-class prediction head"
            )));
        }
        for qi in 0..n {
            let p = sigmoid(pred.logits.row(qi)[class]) as f64;
            let mut c = weights.lambda_cls * (-p);
            match task {
                Task::Detect | Task::InstanceSegment => {
                    let pb = cxcywh_to_xyxy(pred.boxes.row(qi));
                    c += weights.lambda_l1 * l1_box(pred.boxes.row(qi), gt.boxes.row(gi));
                    c += weights.lambda_giou * (1.0 - giou_xyxy(&pb, &gb)?);
                    if task == Task::InstanceSegment {
                        let (pm, gm) = mask_pair(pred, gt, qi, gi)?;
                        c += weights.lambda_mask
                            * crate::losses::bce_mask_loss_grad(&pm, &gm)?.0;
                        c += weights.lambda_dice
                            * crate::losses::dice_loss_grad(&pm.map(sigmoid), &gm)?.0;
                    }
                }
                Task::Pose => {
                    let (pk, gk, vis, s) = keypoint_pair(pred, gt, qi, gi)?;
                    c += weights.lambda_oks * (1.0 - oks(&pk, &gk, &vis, s, &kappa)?);
                }
            }
            vals[gi * n + qi] = c as f32;
        }
    }
    CostMatrix::new(Tensor::new(&[g, n], vals)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(g: usize, n: usize, vals: Vec<f32>) -> CostMatrix {
        CostMatrix::new(Tensor::new(&[g, n], vals).unwrap()).unwrap()
    }

    #[test]
    fn two_by_two_hand_case() {
        let m = hungarian(&cm(2, 2, vec![1.0, 2.0, 3.0, 0.0])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 1.0);
    }

    #[test]
    fn all_zero_matrix_ties_break_to_diagonal() {
        let m = hungarian(&cm(3, 5, vec![0.0; 15])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn diagonal_favoring_matrix() {
        let mut vals = vec![1.0f32; 16];
        for i in 0..4 {
            vals[i * 4 + i] = 0.0;
        }
        let m = hungarian(&cm(4, 4, vals)).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn brute_force_matches_hand_minimum() {
        let m = brute_force_match(&cm(1, 1, vec![2.5])).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.total_cost, 2.5);
    }

    #[test]
    fn more_gt_than_queries_is_rejected() {
        assert!(CostMatrix::new(Tensor::new(&[3, 2], vec![0.0; 6]).unwrap()).is_err());
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        assert!(brute_force_match(&cm(9, 9, vec![0.0; 81])).is_err());
    }

    #[test]
    fn duplicated_rows_still_agree_with_oracle() {
        // Degenerate ties: both rows identical.
        let vals = vec![0.3, 0.1, 0.7, 0.3, 0.1, 0.7];
        let c = cm(2, 3, vals);
        let h = hungarian(&c).unwrap();
        let b = brute_force_match(&c).unwrap();
        assert_eq!(h.pairs, b.pairs);
        // Lexicographic: gt0 takes the cheapest-feasible smallest column set
        assert_eq!(h.pairs, vec![(0, 0), (1, 1)]);
    }

    proptest! {
        #[test]
        fn hungarian_agrees_with_brute_force(
            g in 1usize..6,
            extra in 0usize..3,
            seed_vals in proptest::collection::vec(-50i32..50, 48),
        ) {
            let n = g + extra;
            let vals: Vec<f32> = (0..g * n).map(|i| seed_vals[i % seed_vals.len()] as f32 * 0.25).collect();
            let c = cm(g, n, vals);
            let h = hungarian(&c).unwrap();
            let b = brute_force_match(&c).unwrap();
            prop_assert_eq!(&h.pairs, &b.pairs);
            prop_assert!((h.total_cost - b.total_cost).abs() < 1e-9);
        }

        #[test]
        fn scaling_and_shifting_preserve_the_assignment(
            g in 1usize..5,
            extra in 0usize..3,
            seed_vals in proptest::collection::vec(-100i32..100, 40),
            scale in 1u32..50,
            shift in -20i32..20,
        ) {
            let n = g + extra;
            let vals: Vec<f32> = (0..g * n).map(|i| seed_vals[i % seed_vals.len()] as f32 * 0.5).collect();
            let base = hungarian(&cm(g, n, vals.clone())).unwrap();
            let transformed: Vec<f32> = vals
                .iter()
                .map(|&v| v * scale as f32 + shift as f32)
                .collect();
            let t = hungarian(&cm(g, n, transformed)).unwrap();
            prop_assert_eq!(base.pairs, t.pairs);
        }

        #[test]
        fn assignment_is_injective_and_complete(
            g in 1usize..6,
            extra in 0usize..4,
            seed_vals in proptest::collection::vec(-1000i32..1000, 60),
        ) {
            let n = g + extra;
            let vals: Vec<f32> = (0..g * n).map(|i| seed_vals[i % seed_vals.len()] as f32 * 0.01).collect();
            let h = hungarian(&cm(g, n, vals)).unwrap();
            prop_assert_eq!(h.pairs.len(), g);
            let mut gts: Vec<usize> = h.pairs.iter().map(|p| p.0).collect();
            let mut qs: Vec<usize> = h.pairs.iter().map(|p| p.1).collect();
            gts.dedup();
            prop_assert_eq!(gts.len(), g);
            qs.sort_unstable();
            qs.dedup();
            prop_assert_eq!(qs.len(), g);
        }
    }

    #[test]
    fn detection_cost_hand_recomputation() {
        // 2 gts, 3 queries, hand-checkable numbers.
        let gt = GroundTruthSet {
            boxes: Tensor::new(&[2, 4], vec![0.5, 0.5, 0.2, 0.2, 0.3, 0.7, 0.4, 0.2]).unwrap(),
            classes: vec![1, 0],
            keypoints: None,
            visibility: None,
            scales: None,
            masks: None,
        };
        let pred = PredictionSet {
            logits: Tensor::new(&[3, 2], vec![0.0, 2.0, -1.0, 1.0, 3.0, -2.0]).unwrap(),
            boxes: Tensor::new(
                &[3, 4],
                vec![0.5, 0.5, 0.2, 0.2, 0.3, 0.6, 0.4, 0.3, 0.7, 0.2, 0.2, 0.4],
            )
            .unwrap(),
            keypoints: None,
            kpt_logits: None,
            masks: None,
        };
        let w = LossWeights::detect_default();
        let c = build_cost_matrix(&pred, &gt, &w, Task::Detect).unwrap();

        // Entry (gt 0, query 0): identical boxes, class 1 logit 2.0.
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        let expect = w.lambda_cls * (-p); // l1 = 0, giou loss = 0
        assert!((c.at(0, 0) - expect).abs() < 1e-6, "{} vs {expect}", c.at(0, 0));

        // Entry (gt 1, query 1): recompute every term by hand. Ground truth 1
        // has class 0, and query 1's class-0 logit is -1.0.
        let p = 1.0 / (1.0 + (1.0f64).exp());
        let l1 = 0.0 + 0.1 + 0.0 + 0.1;
        let a = cxcywh_to_xyxy(&[0.3, 0.6, 0.4, 0.3]);
        let b = cxcywh_to_xyxy(&[0.3, 0.7, 0.4, 0.2]);
        let giou = giou_xyxy(&a, &b).unwrap();
        let expect = w.lambda_cls * (-p) + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - giou);
        assert!((c.at(1, 1) - expect).abs() < 1e-6, "{} vs {expect}", c.at(1, 1));
    }

    #[test]
    fn perfect_prediction_is_row_minimum() {
        let gt = GroundTruthSet {
            boxes: Tensor::new(&[1, 4], vec![0.4, 0.4, 0.3, 0.3]).unwrap(),
            classes: vec![0],
            keypoints: None,
            visibility: None,
            scales: None,
            masks: None,
        };
        let pred = PredictionSet {
            logits: Tensor::new(&[3, 1], vec![30.0, 0.0, -1.0]).unwrap(),
            boxes: Tensor::new(
                &[3, 4],
                vec![0.4, 0.4, 0.3, 0.3, 0.6, 0.6, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1],
            )
            .unwrap(),
            keypoints: None,
            kpt_logits: None,
            masks: None,
        };
        let c =
            build_cost_matrix(&pred, &gt, &LossWeights::detect_default(), Task::Detect).unwrap();
        assert!(c.at(0, 0) < c.at(0, 1) && c.at(0, 0) < c.at(0, 2));
    }

    #[test]
    fn identical_predictions_tie_break_to_lower_query() {
        let gt = GroundTruthSet {
            boxes: Tensor::new(&[1, 4], vec![0.5, 0.5, 0.2, 0.2]).unwrap(),
            classes: vec![0],
            keypoints: None,
            visibility: None,
            scales: None,
            masks: None,
        };
        let pred = PredictionSet {
            logits: Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap(),
            boxes: Tensor::new(&[2, 4], vec![0.5, 0.5, 0.2, 0.2, 0.5, 0.5, 0.2, 0.2]).unwrap(),
            keypoints: None,
            kpt_logits: None,
            masks: None,
        };
        let c =
            build_cost_matrix(&pred, &gt, &LossWeights::detect_default(), Task::Detect).unwrap();
        assert_eq!(c.at(0, 0), c.at(0, 1));
        let m = hungarian(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
    }
}
