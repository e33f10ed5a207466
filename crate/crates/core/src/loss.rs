//! Matching cost and set-prediction losses with deep supervision.
//!
//! Every decoder layer is matched to the ground truth independently with the
//! Hungarian algorithm; its loss is
//! `w_cls · focal + w_L1 · L1 + w_giou · (1 − GIoU)` over matched pairs, and
//! the total sums all layers.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, giou_graph, BoxCxCyWh};
use crate::error::{shape_err, Error, Result};
use crate::matching::{hungarian_match, Assignment};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            class: self.class * k,
            l1: self.l1 * k,
            giou: self.giou * k,
            ..*self
        }
    }
}

/// Classification objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassLoss {
    /// Sigmoid focal loss, focal-style matching cost.
    Focal,
    /// Plain per-class sigmoid cross-entropy, `-p` matching cost.
    CrossEntropy,
}

/// Objects of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub boxes: Vec<BoxCxCyWh>,
    pub classes: Vec<usize>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, classes: usize, queries: usize) -> Result<()> {
        if self.boxes.len() != self.classes.len() {
            return Err(Error::Invalid("box and class counts differ".into()));
        }
        if self.len() > queries {
            return Err(Error::TooManyTargets {
                rows: self.len(),
                cols: queries,
            });
        }
        for (b, &c) in self.boxes.iter().zip(&self.classes) {
            if b.iter().any(|v| !(0.0..=1.0).contains(v)) || b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(Error::DegenerateBox(*b));
            }
            if c >= classes {
                return Err(Error::Invalid(format!("class {c} outside [0, {classes})")));
            }
        }
        Ok(())
    }

    fn box_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), 4], self.boxes.concat())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `K × N` matching cost for one layer's predictions.
pub fn matching_cost(
    logits: &Tensor,
    boxes: &Tensor,
    truth: &GroundTruthSet,
    weights: &LossWeights,
    class_loss: ClassLoss,
) -> Result<Vec<Vec<f64>>> {
    let n = logits.rows();
    if boxes.shape() != [n, 4] {
        return Err(shape_err("matching_cost", format!("boxes {:?} for {n} logits", boxes.shape())));
    }
    let c = logits.cols();
    let (alpha, gamma) = (weights.focal_alpha, weights.focal_gamma);
    truth
        .boxes
        .iter()
        .zip(&truth.classes)
        .map(|(tb, &tc)| {
            if tc >= c {
                return Err(shape_err("matching_cost", format!("class {tc} for {c} logits")));
            }
            (0..n)
                .map(|i| {
                    let p = sigmoid(logits.at2(i, tc)).clamp(PROB_EPS, 1.0 - PROB_EPS);
                    let class_cost = match class_loss {
                        ClassLoss::Focal => {
                            let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
                            let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
                            pos - neg
                        }
                        ClassLoss::CrossEntropy => -p,
                    };
                    let pb = boxes.row(i);
                    let l1: f64 = pb.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum();
                    let pbox = [pb[0], pb[1], pb[2], pb[3]];
                    let gi = giou(pbox, *tb)?;
                    Ok(weights.class * class_cost + weights.l1 * l1 + weights.giou * (1.0 - gi))
                })
                .collect()
        })
        .collect()
}

/// Sigmoid focal loss over all `(prediction, class)` pairs: matched pairs are
/// positives, the rest negatives; divided by `normalizer`.
pub fn focal_loss(
    g: &mut Graph,
    logits: Var,
    positives: &[(usize, usize)],
    alpha: f64,
    gamma: f64,
    normalizer: f64,
) -> Result<Var> {
    if !(alpha > 0.0 && alpha < 1.0) || gamma < 0.0 {
        return Err(Error::Invalid(format!("focal parameters alpha={alpha} gamma={gamma}")));
    }
    class_loss_terms(g, logits, positives, Some((alpha, gamma)), normalizer)
}

/// Per-class binary cross-entropy with the same positive/negative layout.
pub fn sigmoid_cross_entropy(g: &mut Graph, logits: Var, positives: &[(usize, usize)], normalizer: f64) -> Result<Var> {
    class_loss_terms(g, logits, positives, None, normalizer)
}

fn class_loss_terms(
    g: &mut Graph,
    logits: Var,
    positives: &[(usize, usize)],
    focal: Option<(f64, f64)>,
    normalizer: f64,
) -> Result<Var> {
    let (n, c) = match *g.shape(logits) {
        [n, c] => (n, c),
        ref s => return Err(shape_err("class_loss", format!("{s:?}"))),
    };
    let mut target = Tensor::zeros(&[n, c]);
    for &(i, k) in positives {
        if i >= n || k >= c {
            return Err(shape_err("class_loss", format!("positive ({i}, {k}) outside [{n}, {c}]")));
        }
        target.data_mut()[i * c + k] = 1.0;
    }
    let mut negative = Tensor::ones(&[n, c]);
    negative
        .data_mut()
        .iter_mut()
        .zip(target.data())
        .for_each(|(m, t)| *m -= t);

    let p = g.sigmoid(logits)?;
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = g.rsub_scalar(1.0, p)?;
    let log_p = g.ln(p)?;
    let log_q = g.ln(q)?;
    let (pos, neg) = match focal {
        Some((alpha, gamma)) => {
            let wq = g.powf(q, gamma)?;
            let wp = g.powf(p, gamma)?;
            let pos = g.mul(wq, log_p)?;
            let neg = g.mul(wp, log_q)?;
            (g.scale(pos, -alpha)?, g.scale(neg, -(1.0 - alpha))?)
        }
        None => (g.scale(log_p, -1.0)?, g.scale(log_q, -1.0)?),
    };
    let t = g.constant(target);
    let m = g.constant(negative);
    let pos = g.mul(pos, t)?;
    let neg = g.mul(neg, m)?;
    let all = g.add(pos, neg)?;
    let total = g.sum(all)?;
    g.scale(total, 1.0 / normalizer.max(1.0))
}

/// Turns a non-finite failure into a divergence report for `component`.
/// The iteration is filled in by the caller that knows it.
fn diverged(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::LossDiverged {
            component,
            iteration: 0,
        },
        e => e,
    }
}

/// Graph nodes and scalar values of one layer's loss.
#[derive(Clone, Debug)]
pub struct LayerLoss {
    pub total: Var,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub assignment: Assignment,
}

/// Matches one layer and builds its weighted loss.
pub fn layer_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    truth: &GroundTruthSet,
    weights: &LossWeights,
    class_loss: ClassLoss,
) -> Result<LayerLoss> {
    let cost = matching_cost(g.value(logits), g.value(boxes), truth, weights, class_loss)?;
    let assignment = hungarian_match(&cost)?;
    let positives: Vec<(usize, usize)> = assignment
        .pairs()
        .map(|(j, i)| (i, truth.classes[j]))
        .collect();
    let normalizer = truth.len().max(1) as f64;
    let cls = match class_loss {
        ClassLoss::Focal => focal_loss(
            g,
            logits,
            &positives,
            weights.focal_alpha,
            weights.focal_gamma,
            normalizer,
        ),
        ClassLoss::CrossEntropy => sigmoid_cross_entropy(g, logits, &positives, normalizer),
    }
    .map_err(diverged("class"))?;
    let class_value = g.value(cls).item();
    let weighted_cls = g.scale(cls, weights.class)?;
    if truth.is_empty() {
        return Ok(LayerLoss {
            total: weighted_cls,
            class: class_value,
            l1: 0.0,
            giou: 0.0,
            assignment,
        });
    }

    let matched = g.select_rows(boxes, &assignment.columns)?;
    let target = g.constant(truth.box_tensor()?);
    let l1 = (|| {
        let diff = g.sub(matched, target)?;
        let abs = g.abs(diff)?;
        let l1 = g.sum(abs)?;
        g.scale(l1, 1.0 / normalizer)
    })()
    .map_err(diverged("l1"))?;

    let gl = (|| {
        let gi = giou_graph(g, matched, target)?;
        let one_minus = g.rsub_scalar(1.0, gi)?;
        let gl = g.sum(one_minus)?;
        g.scale(gl, 1.0 / normalizer)
    })()
    .map_err(diverged("giou"))?;

    let (l1_value, giou_value) = (g.value(l1).item(), g.value(gl).item());
    let wl1 = g.scale(l1, weights.l1)?;
    let wgl = g.scale(gl, weights.giou)?;
    let sum = g.add(weighted_cls, wl1)?;
    let total = g.add(sum, wgl)?;
    Ok(LayerLoss {
        total,
        class: class_value,
        l1: l1_value,
        giou: giou_value,
        assignment,
    })
}

/// Summed loss over all layers plus per-component totals.
#[derive(Clone, Debug)]
pub struct SetLoss {
    pub total: Var,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub layers: Vec<LayerLoss>,
}

/// Deep-supervised set loss over `(logits, boxes)` of every decoder layer.
pub fn set_loss(
    g: &mut Graph,
    predictions: &[(Var, Var)],
    truth: &GroundTruthSet,
    weights: &LossWeights,
    class_loss: ClassLoss,
) -> Result<SetLoss> {
    if predictions.is_empty() {
        return Err(Error::Invalid("set loss needs at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(predictions.len());
    for &(logits, boxes) in predictions {
        layers.push(layer_loss(g, logits, boxes, truth, weights, class_loss)?);
    }
    let mut total = layers[0].total;
    for l in &layers[1..] {
        total = g.add(total, l.total)?;
    }
    Ok(SetLoss {
        total,
        class: layers.iter().map(|l| l.class).sum(),
        l1: layers.iter().map(|l| l.l1).sum(),
        giou: layers.iter().map(|l| l.giou).sum(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_single_positive_hand_value() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 1]));
        let l = focal_loss(&mut g, logits, &[(0, 0)], 0.25, 2.0, 1.0).unwrap();
        let want = -0.25 * 0.25 * 0.5f64.ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert!((want - 0.043321698784996576).abs() < 1e-15);
    }

    #[test]
    fn focal_with_zero_gamma_is_half_bce() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let logits = g.constant(x);
        let pos = [(0, 1), (1, 0)];
        let f = focal_loss(&mut g, logits, &pos, 0.5, 0.0, 1.0).unwrap();
        let b = sigmoid_cross_entropy(&mut g, logits, &pos, 1.0).unwrap();
        assert!((g.value(f).item() - 0.5 * g.value(b).item()).abs() < 1e-14);
    }

    #[test]
    fn focal_saturates_on_confident_positive() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[1, 1], 30.0));
        let l = focal_loss(&mut g, logits, &[(0, 0)], 0.25, 2.0, 1.0).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn focal_rejects_bad_alpha() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 1]));
        assert!(focal_loss(&mut g, logits, &[], 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn cost_is_uniform_without_class_term_and_identical_boxes() {
        let b = [0.5, 0.5, 0.2, 0.2];
        let truth = GroundTruthSet {
            boxes: vec![b, b],
            classes: vec![0, 1],
        };
        let boxes = Tensor::from_rows(&vec![b.to_vec(); 3]).unwrap();
        let logits = Tensor::new(vec![3, 2], vec![0.1, 2.0, -3.0, 0.5, 1.0, 1.0]).unwrap();
        let w = LossWeights {
            class: 0.0,
            ..LossWeights::default()
        };
        let cost = matching_cost(&logits, &boxes, &truth, &w, ClassLoss::Focal).unwrap();
        let first = cost[0][0];
        assert!(cost.iter().flatten().all(|&v| v == first));
        assert_eq!(hungarian_match(&cost).unwrap().columns, vec![0, 1]);
    }

    #[test]
    fn cost_stays_finite_for_extreme_logits() {
        let b = [0.5, 0.5, 0.2, 0.2];
        let truth = GroundTruthSet {
            boxes: vec![b],
            classes: vec![0],
        };
        let boxes = Tensor::from_rows(&[b.to_vec(), b.to_vec()]).unwrap();
        let logits = Tensor::new(vec![2, 1], vec![800.0, -800.0]).unwrap();
        let cost = matching_cost(&logits, &boxes, &truth, &LossWeights::default(), ClassLoss::Focal).unwrap();
        assert!(cost.iter().flatten().all(|v| v.is_finite()));
        assert!(cost[0][0] < cost[0][1]);
    }
}
