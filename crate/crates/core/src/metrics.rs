//! Classification, detection and segmentation scores, plus dataset-level evaluation.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{resize_image, BoundingBox, ImageSample};
use crate::error::{Error, Result};
use crate::model::Predictor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[bool], truths: &[bool]) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::Shape {
                expected: format!("{} predictions", truths.len()),
                actual: preds.len().to_string(),
            });
        }
        let mut c = Self::default();
        for (&p, &t) in preds.iter().zip(truths) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Harmonic mean of precision and recall, as `2TP / (2TP + FP + FN)`; 0 without true positives.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub avg_precision: f64,
    pub mean_box_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dice: f64,
    pub mask_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classification: ClassificationMetrics,
    pub detection: DetectionMetrics,
    pub segmentation: SegmentationMetrics,
}

impl MetricsReport {
    /// `(group, row label, value)` in table order.
    pub fn rows(&self) -> [(&'static str, &'static str, f64); 7] {
        [
            ("Classification", "Accuracy", self.classification.accuracy),
            ("Classification", "Recall", self.classification.recall),
            ("Classification", "F1-score", self.classification.f1),
            ("Detection", "Avg. Precision", self.detection.avg_precision),
            ("Detection", "IoU Score", self.detection.mean_box_iou),
            ("Segmentation", "Dice-Coefficient", self.segmentation.dice),
            ("Segmentation", "IoU Score", self.segmentation.mask_iou),
        ]
    }

    /// Aligned text table grouped by task.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let rule = format!("+{}+{}+{}+\n", "-".repeat(16), "-".repeat(18), "-".repeat(8));
        out.push_str(&rule);
        out.push_str(&format!("| {:<14} | {:<16} | {:>6} |\n", "Metric", "", "Value"));
        out.push_str(&rule);
        let mut last = "";
        for (group, label, value) in self.rows() {
            if group != last && !last.is_empty() {
                out.push_str(&rule);
            }
            let shown = if group == last { "" } else { group };
            out.push_str(&format!("| {shown:<14} | {label:<16} | {value:>6.4} |\n"));
            last = group;
        }
        out.push_str(&rule);
        out
    }
}

pub fn classification_metrics(preds: &[bool], truths: &[bool]) -> Result<ClassificationMetrics> {
    if truths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = ConfusionCounts::from_predictions(preds, truths)?;
    Ok(ClassificationMetrics { accuracy: c.accuracy(), recall: c.recall(), f1: c.f1() })
}

/// Intersection over union of two normalized boxes; 0 when disjoint.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of images whose single predicted box reaches `iou ≥ threshold`.
pub fn average_precision(preds: &[BoundingBox], truths: &[BoundingBox], iou_threshold: f64) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Shape { expected: format!("{} boxes", truths.len()), actual: preds.len().to_string() });
    }
    if truths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| box_iou(p, t) >= iou_threshold).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// `(|P∩T|, |P|, |T|)` pixel counts.
fn overlap(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<(usize, usize, usize)> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape { expected: format!("{:?}", truth.dim()), actual: format!("{:?}", pred.dim()) });
    }
    let mut inter = 0;
    let mut p_count = 0;
    let mut t_count = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p != 0, t != 0);
        inter += usize::from(p && t);
        p_count += usize::from(p);
        t_count += usize::from(t);
    }
    Ok((inter, p_count, t_count))
}

/// `2|P∩T| / (|P|+|T|)`, 1 when both masks are empty.
pub fn dice_coefficient(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<f64> {
    let (inter, p, t) = overlap(pred, truth)?;
    Ok(if p + t == 0 { 1.0 } else { 2.0 * inter as f64 / (p + t) as f64 })
}

/// `|P∩T| / |P∪T|`, 1 when both masks are empty.
pub fn mask_iou(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<f64> {
    let (inter, p, t) = overlap(pred, truth)?;
    let union = p + t - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Decision thresholds used when scoring a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    pub classification: f64,
    pub mask: f64,
    pub iou: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { classification: 0.5, mask: 0.5, iou: 0.5 }
    }
}

/// Pixel is 1 iff probability ≥ threshold.
pub fn binarize(probs: &Array2<f32>, threshold: f64) -> Array2<u8> {
    probs.mapv(|p| u8::from(p as f64 >= threshold))
}

/// Bilinear resample of a probability map to `h×w`.
pub fn upsample_probs(probs: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    if probs.dim() == (h, w) {
        return probs.clone();
    }
    let lifted: Array3<f32> = probs.clone().insert_axis(Axis(2));
    resize_image(&lifted, h, w).index_axis_move(Axis(2), 0)
}

/// Scores a predictor on a labeled split.
///
/// Classification covers every sample. Detection covers bleeding samples with a
/// box, segmentation bleeding samples with a mask; both are per-image means.
/// Predicted masks are resampled to the annotation's resolution before thresholding.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[ImageSample],
    thresholds: &EvalThresholds,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predictions = predictor.predict_samples(samples)?;

    let mut cls_preds = Vec::with_capacity(samples.len());
    let mut cls_truths = Vec::with_capacity(samples.len());
    let mut boxes = (Vec::new(), Vec::new());
    let mut dice = Vec::new();
    let mut iou = Vec::new();
    for (s, p) in samples.iter().zip(&predictions) {
        cls_preds.push(p.bleed_prob >= thresholds.classification);
        cls_truths.push(s.label.is_bleeding());
        if !s.label.is_bleeding() {
            continue;
        }
        if let Some(b) = s.bbox {
            boxes.0.push(p.bbox);
            boxes.1.push(b);
        }
        if let Some(m) = &s.mask {
            let (h, w) = m.dim();
            let pred_mask = binarize(&upsample_probs(&p.mask_probs, h, w), thresholds.mask);
            dice.push(dice_coefficient(&pred_mask, m)?);
            iou.push(mask_iou(&pred_mask, m)?);
        }
    }
    if boxes.1.is_empty() || dice.is_empty() {
        return Err(Error::NoLocalizationTargets);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let box_ious: Vec<f64> = boxes.0.iter().zip(&boxes.1).map(|(p, t)| box_iou(p, t)).collect();
    Ok(MetricsReport {
        classification: classification_metrics(&cls_preds, &cls_truths)?,
        detection: DetectionMetrics {
            avg_precision: average_precision(&boxes.0, &boxes.1, thresholds.iou)?,
            mean_box_iou: mean(&box_ious),
        },
        segmentation: SegmentationMetrics { dice: mean(&dice), mask_iou: mean(&iou) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox { x_min: a, y_min: b, x_max: c, y_max: d }
    }

    #[test]
    fn perfect_classification() {
        let t = [true, false, true, true, false];
        let m = classification_metrics(&t, &t).unwrap();
        assert_eq!((m.accuracy, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_counted_confusion() {
        // tp=3, fp=1, tn=4, fn=2
        let preds = [true, true, true, true, false, false, false, false, false, false];
        let truths = [true, true, true, false, false, false, false, false, true, true];
        let c = ConfusionCounts::from_predictions(&preds, &truths).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 });
        let m = classification_metrics(&preds, &truths).unwrap();
        assert_abs_diff_eq!(m.accuracy, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(m.recall, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn all_negative_conventions() {
        let m = classification_metrics(&[false; 4], &[false; 4]).unwrap();
        assert_eq!((m.accuracy, m.recall, m.f1), (1.0, 0.0, 0.0));
        assert!(classification_metrics(&[true], &[true, false]).is_err());
    }

    #[test]
    fn box_iou_examples() {
        let a = bb(0.1, 0.2, 0.4, 0.6);
        assert_abs_diff_eq!(box_iou(&a, &a), 1.0, epsilon = 1e-12);
        assert_eq!(box_iou(&a, &bb(0.5, 0.5, 0.9, 0.9)), 0.0);
        assert_abs_diff_eq!(box_iou(&bb(0.0, 0.0, 0.5, 0.5), &bb(0.25, 0.25, 0.75, 0.75)), 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn hit_rate_precision() {
        let t = bb(0.0, 0.0, 1.0, 1.0);
        // Boxes anchored at the origin with area = target IoU against the unit box.
        let with_iou = |v: f64| bb(0.0, 0.0, v, 1.0);
        let preds = [with_iou(0.6), with_iou(0.7), with_iou(0.2), with_iou(0.55)];
        assert_abs_diff_eq!(average_precision(&preds, &[t; 4], 0.5).unwrap(), 0.75, epsilon = 1e-12);
        assert_eq!(average_precision(&[t], &[t], 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&[bb(0.0, 0.0, 0.1, 0.1)], &[bb(0.5, 0.5, 0.6, 0.6)], 0.5).unwrap(), 0.0);
        assert!(average_precision(&[], &[], 0.5).is_err());
    }

    #[test]
    fn mask_scores() {
        let truth = array![[1u8, 1], [1, 0]];
        let pred = array![[1u8, 1], [0, 1]];
        assert_abs_diff_eq!(dice_coefficient(&pred, &truth).unwrap(), 4.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mask_iou(&pred, &truth).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(dice_coefficient(&truth, &truth).unwrap(), 1.0);
        let empty = Array2::<u8>::zeros((2, 2));
        assert_eq!(dice_coefficient(&empty, &empty).unwrap(), 1.0);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        let left = array![[1u8, 0], [1, 0]];
        let right = array![[0u8, 1], [0, 1]];
        assert_eq!(mask_iou(&left, &right).unwrap(), 0.0);
        assert!(dice_coefficient(&left, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn table_groups_rows() {
        let r = MetricsReport {
            classification: ClassificationMetrics { accuracy: 1.0, recall: 1.0, f1: 1.0 },
            detection: DetectionMetrics { avg_precision: 1.0, mean_box_iou: 1.0 },
            segmentation: SegmentationMetrics { dice: 1.0, mask_iou: 1.0 },
        };
        let t = r.to_table();
        let c = t.find("Classification").unwrap();
        let d = t.find("Detection").unwrap();
        let s = t.find("Segmentation").unwrap();
        assert!(c < d && d < s);
        assert_eq!(t.matches("1.0000").count(), 7);
        let lines: Vec<usize> = t.lines().map(|l| l.chars().count()).collect();
        assert!(lines.windows(2).all(|w| w[0] == w[1]));
    }
}
