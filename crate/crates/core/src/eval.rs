//! COCO-style average precision with 101-point interpolation.

use crate::boxes::{iou, BoxCxCyWh};
use crate::error::{Error, Result};
use crate::loss::GroundTruthSet;
use crate::model::{Detector, Prediction};
use crate::nn::ParamStore;
use crate::scene::Scene;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BoxCxCyWh,
}

/// Every (query, class) pair of a prediction becomes a scored detection.
pub fn detections(image: usize, pred: &Prediction) -> Vec<Detection> {
    let c = pred.logits.cols();
    let mut out = Vec::with_capacity(pred.logits.numel());
    for q in 0..pred.logits.rows() {
        let b = pred.boxes.row(q);
        for k in 0..c {
            let z = pred.logits.at2(q, k);
            out.push(Detection {
                image,
                class: k,
                score: 1.0 / (1.0 + (-z).exp()),
                bbox: [b[0], b[1], b[2], b[3]],
            });
        }
    }
    out
}

/// Precision/recall curve of one class, summarized at 101 recall points.
fn class_ap(dets: &[&Detection], truths: &[GroundTruthSet], class: usize, threshold: f64, positives: usize) -> f64 {
    let mut order: Vec<&Detection> = dets.to_vec();
    // Stable: equal scores keep image/query order.
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, d) in order.iter().enumerate() {
        let t = &truths[d.image];
        let mut best: Option<(usize, f64)> = None;
        for (j, (b, &k)) in t.boxes.iter().zip(&t.classes).enumerate() {
            if k != class || taken[d.image][j] {
                continue;
            }
            let v = iou(d.bbox, *b);
            if v >= threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[d.image][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    // Monotone envelope from the right.
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let at = recall.partition_point(|&x| x < level);
        if at < precision.len() {
            sum += precision[at];
        }
    }
    sum / 101.0
}

/// AP at one IoU threshold, averaged over classes that have ground truth.
/// Returns `None` when no image contains any object.
pub fn average_precision(
    dets: &[Detection],
    truths: &[GroundTruthSet],
    classes: usize,
    threshold: f64,
) -> Result<Option<f64>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Invalid(format!("IoU threshold {threshold} outside (0, 1]")));
    }
    if let Some(d) = dets.iter().find(|d| d.image >= truths.len() || d.class >= classes) {
        return Err(Error::Invalid(format!(
            "detection for image {} class {} outside {} images / {classes} classes",
            d.image,
            d.class,
            truths.len()
        )));
    }
    let mut aps = Vec::new();
    for k in 0..classes {
        let positives = truths
            .iter()
            .map(|t| t.classes.iter().filter(|&&c| c == k).count())
            .sum::<usize>();
        if positives == 0 {
            continue;
        }
        let mine: Vec<&Detection> = dets.iter().filter(|d| d.class == k).collect();
        aps.push(class_ap(&mine, truths, k, threshold, positives));
    }
    if aps.is_empty() {
        return Ok(None);
    }
    Ok(Some(aps.iter().sum::<f64>() / aps.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApReport {
    pub ap50: f64,
    /// Mean over thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub scenes: usize,
}

pub fn ap_report(dets: &[Detection], truths: &[GroundTruthSet], classes: usize) -> Result<ApReport> {
    let mut per = Vec::new();
    for t in coco_thresholds() {
        per.push(average_precision(dets, truths, classes, t)?.unwrap_or(0.0));
    }
    Ok(ApReport {
        ap50: per[0],
        ap: per.iter().sum::<f64>() / per.len() as f64,
        scenes: truths.len(),
    })
}

/// Runs the detector on every scene and scores its final-layer predictions.
pub fn evaluate(model: &Detector, params: &ParamStore, scenes: &[Scene]) -> Result<ApReport> {
    if scenes.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one scene".into()));
    }
    let mut dets = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        dets.extend(detections(i, &model.predict(params, &s.image)?));
    }
    let truths: Vec<GroundTruthSet> = scenes.iter().map(|s| s.truth.clone()).collect();
    ap_report(&dets, &truths, model.config.classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(boxes: &[[f64; 4]], classes: &[usize]) -> GroundTruthSet {
        GroundTruthSet {
            boxes: boxes.to_vec(),
            classes: classes.to_vec(),
        }
    }

    fn det(image: usize, class: usize, score: f64, bbox: [f64; 4]) -> Detection {
        Detection {
            image,
            class,
            score,
            bbox,
        }
    }

    #[test]
    fn perfect_detections() {
        let t = vec![truth(&[[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], &[0, 1])];
        let d = vec![det(0, 0, 0.9, [0.3, 0.3, 0.2, 0.2]), det(0, 1, 0.8, [0.7, 0.7, 0.2, 0.2])];
        let r = ap_report(&d, &t, 2).unwrap();
        assert_eq!((r.ap50, r.ap), (1.0, 1.0));
    }

    #[test]
    fn no_detections_is_zero() {
        let t = vec![truth(&[[0.3, 0.3, 0.2, 0.2]], &[0])];
        assert_eq!(ap_report(&[], &t, 1).unwrap().ap, 0.0);
    }

    #[test]
    fn one_of_two_found() {
        // Recall reaches 0.5 at precision 1; the 51 recall points up to 0.5
        // score 1, the rest 0.
        let t = vec![truth(&[[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], &[0, 0])];
        let d = vec![det(0, 0, 0.9, [0.3, 0.3, 0.2, 0.2])];
        let ap = average_precision(&d, &t, 1, 0.5).unwrap().unwrap();
        assert_eq!(ap, 51.0 / 101.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let t = vec![truth(&[[0.5, 0.5, 0.2, 0.2]], &[0])];
        let b = [0.5, 0.5, 0.2, 0.2];
        let d = vec![det(0, 0, 0.4, b), det(0, 0, 0.9, b)];
        // Top-ranked hit first, so precision stays 1 up to full recall.
        assert_eq!(average_precision(&d, &t, 1, 0.5).unwrap(), Some(1.0));
        let d = vec![det(0, 0, 0.9, [0.1, 0.1, 0.05, 0.05]), det(0, 0, 0.4, b)];
        assert_eq!(average_precision(&d, &t, 1, 0.5).unwrap(), Some(0.5));
    }

    #[test]
    fn wrong_class_does_not_match() {
        let t = vec![truth(&[[0.5, 0.5, 0.2, 0.2]], &[0])];
        let d = vec![det(0, 1, 0.9, [0.5, 0.5, 0.2, 0.2])];
        assert_eq!(average_precision(&d, &t, 2, 0.5).unwrap(), Some(0.0));
    }

    #[test]
    fn errors() {
        let t = vec![truth(&[[0.5, 0.5, 0.2, 0.2]], &[0])];
        assert!(average_precision(&[], &t, 1, 0.0).is_err());
        assert!(average_precision(&[det(3, 0, 0.5, [0.5; 4])], &t, 1, 0.5).is_err());
        assert_eq!(average_precision(&[], &[truth(&[], &[])], 1, 0.5).unwrap(), None);
    }
}
