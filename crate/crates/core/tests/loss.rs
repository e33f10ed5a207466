use cdetr::boxes::{giou, iou};
use cdetr::loss::{focal_loss, matching_cost, set_loss, ClassLoss, GroundTruthSet, LossWeights};
use cdetr::matching::{brute_force_match, hungarian_match};
use cdetr::{Graph, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Area-based GIoU written from scratch on corner coordinates.
fn giou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let c = |x: [f64; 4]| (x[0] - x[2] / 2.0, x[1] - x[3] / 2.0, x[0] + x[2] / 2.0, x[1] + x[3] / 2.0);
    let (ax0, ay0, ax1, ay1) = c(a);
    let (bx0, by0, bx1, by1) = c(b);
    let overlap = |lo0: f64, hi0: f64, lo1: f64, hi1: f64| (hi0.min(hi1) - lo0.max(lo1)).max(0.0);
    let inter = overlap(ax0, ax1, bx0, bx1) * overlap(ay0, ay1, by0, by1);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (hull - union) / hull
}

/// Scalar focal loss over every (prediction, class) pair.
fn focal_oracle(logits: &[Vec<f64>], positives: &[(usize, usize)], alpha: f64, gamma: f64, norm: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        for (k, &z) in row.iter().enumerate() {
            let p = sig(z);
            total += if positives.contains(&(i, k)) {
                -alpha * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
            };
        }
    }
    total / norm
}

/// Exhaustive minimum over injective maps, lexicographically first optimum.
fn min_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        if row == cost.len() {
            if best.0.is_infinite() || acc < best.0 - 1e-9 * best.0.abs().max(1.0) {
                *best = (acc, cur.clone());
            }
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(cost, row + 1, used, cur, acc + cost[row][c], best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    let cols = cost.first().map_or(0, Vec::len);
    go(cost, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=5, 0usize..=3).prop_flat_map(|(k, extra)| vec(vec(-10.0..10.0f64, k + extra), k))
}

fn boxes_strategy() -> impl Strategy<Value = [f64; 4]> {
    (0.1..0.9f64, 0.1..0.9f64, 0.02..0.4f64, 0.02..0.4f64).prop_map(|(x, y, w, h)| [x, y, w, h])
}

fn scene_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<[f64; 4]>, GroundTruthSet)> {
    (1usize..=4, 0usize..=3).prop_flat_map(|(k, extra)| {
        let n = k + extra;
        (
            vec(vec(-4.0..4.0f64, 3), n),
            vec(boxes_strategy(), n),
            vec((boxes_strategy(), 0usize..3), k),
        )
            .prop_map(|(logits, boxes, truth)| {
                let (b, c) = truth.into_iter().unzip();
                (logits, boxes, GroundTruthSet { boxes: b, classes: c })
            })
    })
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn box_tensor(b: &[[f64; 4]]) -> Tensor {
    Tensor::from_rows(&b.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn total_loss(logits: &[Vec<f64>], boxes: &[[f64; 4]], truth: &GroundTruthSet, w: &LossWeights) -> (f64, Vec<usize>) {
    let mut g = Graph::new();
    let l = g.constant(to_tensor(logits));
    let b = g.constant(box_tensor(boxes));
    let s = set_loss(&mut g, &[(l, b)], truth, w, ClassLoss::Focal).unwrap();
    (g.value(s.total).item(), s.layers[0].assignment.columns.clone())
}

#[test]
fn focal_loss_of_an_undecided_positive() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[1, 1]));
    let l = focal_loss(&mut g, z, &[(0, 0)], 0.25, 2.0, 1.0).unwrap();
    let want = 0.25 * 0.25 * std::f64::consts::LN_2;
    assert!((g.value(l).item() - want).abs() < 1e-12);
    assert!((want - 0.043_321_698_784_996_6).abs() < 1e-15);
}

#[test]
fn giou_reference_configurations() {
    let unit = [0.5, 0.5, 0.2, 0.2];
    assert_eq!(giou(unit, unit).unwrap(), 1.0);
    // Half-overlapping along x: IoU 1/3 and no slack in the hull.
    assert!((giou(unit, [0.6, 0.5, 0.2, 0.2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    // Disjoint, one width apart: the hull spans three boxes, the union two.
    assert!((giou([0.2, 0.5, 0.2, 0.2], [0.6, 0.5, 0.2, 0.2]).unwrap() + 1.0 / 3.0).abs() < 1e-12);
    assert!(giou(unit, [0.5, 0.5, 0.0, 0.2]).is_err());
}

proptest! {
    #[test]
    fn hungarian_matches_exhaustive_search(cost in cost_matrix()) {
        let h = hungarian_match(&cost).unwrap();
        let (best, cols) = min_assignment(&cost);
        prop_assert!((h.total(&cost) - best).abs() < 1e-9);
        prop_assert_eq!(&h.columns, &cols);
        prop_assert_eq!(brute_force_match(&cost).unwrap().columns, cols);
    }

    #[test]
    fn assignment_is_injective(cost in cost_matrix()) {
        let mut cols = hungarian_match(&cost).unwrap().columns;
        let k = cols.len();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), k);
    }

    #[test]
    fn giou_is_symmetric_bounded_and_below_iou(a in boxes_strategy(), b in boxes_strategy()) {
        let ab = giou(a, b).unwrap();
        prop_assert_eq!(ab, giou(b, a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!(ab <= iou(a, b) + 1e-15);
        prop_assert!((ab - giou_oracle(a, b)).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_matches_scalar_sum(
        logits in vec(vec(-6.0..6.0f64, 3), 1..5),
        alpha in 0.05..0.95f64,
        gamma in 0.0..3.0f64,
        norm in 1.0..4.0f64,
    ) {
        let positives: Vec<(usize, usize)> = (0..logits.len()).step_by(2).map(|i| (i, i % 3)).collect();
        let mut g = Graph::new();
        let z = g.constant(to_tensor(&logits));
        let l = focal_loss(&mut g, z, &positives, alpha, gamma, norm).unwrap();
        let want = focal_oracle(&logits, &positives, alpha, gamma, norm);
        prop_assert!((g.value(l).item() - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn loss_ignores_ground_truth_order((logits, boxes, truth) in scene_strategy(), seed in any::<u64>()) {
        let w = LossWeights::default();
        let k = truth.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.rotate_left((seed as usize) % k);
        let shuffled = GroundTruthSet {
            boxes: order.iter().map(|&j| truth.boxes[j]).collect(),
            classes: order.iter().map(|&j| truth.classes[j]).collect(),
        };
        let (a, _) = total_loss(&logits, &boxes, &truth, &w);
        let (b, _) = total_loss(&logits, &boxes, &shuffled, &w);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn doubling_the_weights_doubles_the_loss((logits, boxes, truth) in scene_strategy()) {
        let w = LossWeights::default();
        let (a, ca) = total_loss(&logits, &boxes, &truth, &w);
        let (b, cb) = total_loss(&logits, &boxes, &truth, &w.scaled(2.0));
        prop_assert_eq!(ca, cb);
        prop_assert!((b - 2.0 * a).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn matched_cost_matches_per_pair_oracle((logits, boxes, truth) in scene_strategy()) {
        let w = LossWeights::default();
        let cost = matching_cost(&to_tensor(&logits), &box_tensor(&boxes), &truth, &w, ClassLoss::Focal).unwrap();
        for (j, row) in cost.iter().enumerate() {
            for (i, &c) in row.iter().enumerate() {
                let p = sig(logits[i][truth.classes[j]]);
                let cls = 0.25 * (1.0 - p).powi(2) * -p.ln() - 0.75 * p.powi(2) * -(1.0 - p).ln();
                let l1: f64 = (0..4).map(|t| (boxes[i][t] - truth.boxes[j][t]).abs()).sum();
                let want = 2.0 * cls + 5.0 * l1 + 2.0 * (1.0 - giou_oracle(boxes[i], truth.boxes[j]));
                prop_assert!((c - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn perfect_predictions_reach_the_floors() {
    let truth = GroundTruthSet {
        boxes: vec![[0.3, 0.4, 0.2, 0.1], [0.7, 0.6, 0.1, 0.3]],
        classes: vec![2, 0],
    };
    // Queries 1 and 3 hit the objects, the others are confident background.
    let boxes = vec![[0.5, 0.5, 0.3, 0.3], truth.boxes[1], [0.2, 0.8, 0.1, 0.1], truth.boxes[0]];
    let mut logits = vec![vec![-12.0; 3]; 4];
    logits[1][0] = 12.0;
    logits[3][2] = 12.0;
    let mut g = Graph::new();
    let l = g.constant(to_tensor(&logits));
    let b = g.constant(box_tensor(&boxes));
    let s = set_loss(&mut g, &[(l, b), (l, b)], &truth, &LossWeights::default(), ClassLoss::Focal).unwrap();
    assert_eq!(s.layers[0].assignment.columns, vec![3, 1]);
    assert_eq!(s.l1, 0.0);
    assert_eq!(s.giou, 0.0);
    assert!(s.class < 1e-10, "{}", s.class);
    assert!(g.value(s.total).item() < 1e-9);
}

#[test]
fn empty_scene_has_only_a_background_term() {
    let truth = GroundTruthSet { boxes: vec![], classes: vec![] };
    let logits = vec![vec![0.0; 2]; 3];
    let mut g = Graph::new();
    let l = g.constant(to_tensor(&logits));
    let b = g.constant(box_tensor(&[[0.5; 4]; 3]));
    let s = set_loss(&mut g, &[(l, b)], &truth, &LossWeights::default(), ClassLoss::Focal).unwrap();
    let want = 2.0 * focal_oracle(&logits, &[], 0.25, 2.0, 1.0);
    assert!((g.value(s.total).item() - want).abs() < 1e-12);
}

#[test]
fn more_objects_than_queries_is_an_error() {
    let truth = GroundTruthSet {
        boxes: vec![[0.5; 4]; 3],
        classes: vec![0; 3],
    };
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[2, 1]));
    let b = g.constant(box_tensor(&[[0.5; 4]; 2]));
    assert!(set_loss(&mut g, &[(l, b)], &truth, &LossWeights::default(), ClassLoss::Focal).is_err());
}
