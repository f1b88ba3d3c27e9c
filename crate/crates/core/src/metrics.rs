//! Detection evaluation: IoU, greedy NMS, score-ordered matching, PR curves,
//! 101-point interpolated AP, mAP at IoU 0.50 and averaged over 0.50:0.95.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Corner-form box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x2 >= x1 && y2 >= y1, "inverted box ({x1}, {y1}, {x2}, {y2})");
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clamp(&self, size: f64) -> BBox {
        let c = |v: f64| v.clamp(0.0, size);
        BBox::new(c(self.x1), c(self.y1), c(self.x2).max(c(self.x1)), c(self.y2).max(c(self.y1)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub image_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
    pub image_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Score of the detection that produced this point.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub class_id: usize,
    pub points: Vec<PrPoint>,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices of `dets` ordered by descending score, ties by input index.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Class-wise greedy suppression: a detection survives unless a kept
/// detection of the same class (and image) overlaps it with IoU above
/// `iou_thresh`. Output is ordered by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranked(dets) {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.image_id == d.image_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Outcome of matching one detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchFlag {
    /// Index into the input detection list.
    pub det_index: usize,
    pub true_positive: bool,
    /// Ground truth consumed by this detection.
    pub gt_index: Option<usize>,
}

/// Greedy matching in descending score order. Each detection takes the
/// unmatched same-class, same-image ground truth with the highest IoU at or
/// above `iou_thresh`. Returns one flag per detection, in ranked order.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Vec<MatchFlag> {
    let mut matched = vec![false; gts.len()];
    let flags: Vec<MatchFlag> = ranked(dets)
        .into_iter()
        .map(|di| {
            let d = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if matched[gi] || g.class_id != d.class_id || g.image_id != d.image_id {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                matched[gi] = true;
            }
            MatchFlag {
                det_index: di,
                true_positive: best.is_some(),
                gt_index: best.map(|(gi, _)| gi),
            }
        })
        .collect();
    debug_assert!({
        let used: Vec<usize> = flags.iter().filter_map(|f| f.gt_index).collect();
        used.iter().collect::<BTreeSet<_>>().len() == used.len()
    });
    flags
}

/// Cumulative precision/recall down a ranked list of TP/FP flags.
pub fn pr_curve(class_id: usize, flags: &[bool], scores: &[f64], num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let points = flags
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&f, &score))| {
            tp += f as usize;
            PrPoint {
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
                precision: tp as f64 / (i + 1) as f64,
                score,
            }
        })
        .collect();
    PrCurve { class_id, points }
}

/// 101-point interpolated average precision.
pub fn average_precision(curve: &PrCurve) -> f64 {
    // running max of precision from the tail
    let mut envelope: Vec<(f64, f64)> = Vec::with_capacity(curve.points.len());
    let mut best = 0.0f64;
    for p in curve.points.iter().rev() {
        best = best.max(p.precision);
        envelope.push((p.recall, best));
    }
    envelope.reverse();
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            envelope.iter().find(|(rec, _)| *rec >= r).map_or(0.0, |&(_, p)| p)
        })
        .sum();
    total / 101.0
}

/// Per-class evaluation at one IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEval {
    pub class_id: usize,
    pub num_gt: usize,
    pub ap: f64,
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdEval {
    pub iou_thresh: f64,
    pub classes: Vec<ClassEval>,
    /// Classes with detections but no ground truth (AP undefined, excluded).
    pub excluded_classes: Vec<usize>,
}

impl ThresholdEval {
    pub fn mean_ap(&self) -> Result<f64> {
        if self.classes.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok(self.classes.iter().map(|c| c.ap).sum::<f64>() / self.classes.len() as f64)
    }

    pub fn ap_of(&self, class_id: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class_id == class_id).map(|c| c.ap)
    }
}

pub fn evaluate_at(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> ThresholdEval {
    let flags = match_detections(dets, gts, iou_thresh);
    let class_ids: BTreeSet<usize> = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).collect();
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for c in class_ids {
        let num_gt = gts.iter().filter(|g| g.class_id == c).count();
        let (tp, scores): (Vec<bool>, Vec<f64>) = flags
            .iter()
            .filter(|f| dets[f.det_index].class_id == c)
            .map(|f| (f.true_positive, dets[f.det_index].score))
            .unzip();
        if num_gt == 0 {
            if !tp.is_empty() {
                excluded.push(c);
            }
            continue;
        }
        let curve = pr_curve(c, &tp, &scores, num_gt);
        classes.push(ClassEval {
            class_id: c,
            num_gt,
            ap: average_precision(&curve),
            curve,
        });
    }
    ThresholdEval {
        iou_thresh,
        classes,
        excluded_classes: excluded,
    }
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub fn map50(dets: &[Detection], gts: &[GroundTruth]) -> Result<f64> {
    evaluate_at(dets, gts, 0.5).mean_ap()
}

pub fn map50_95(dets: &[Detection], gts: &[GroundTruth]) -> Result<f64> {
    let per: Vec<f64> = coco_thresholds().iter().map(|&t| evaluate_at(dets, gts, t).mean_ap()).collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Everything reported for one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub map50: f64,
    pub map50_95: f64,
    /// Evaluation at IoU 0.50 (per-class AP and PR curves).
    pub at50: ThresholdEval,
}

impl EvalSummary {
    pub fn compute(dets: &[Detection], gts: &[GroundTruth]) -> Result<Self> {
        let at50 = evaluate_at(dets, gts, 0.5);
        Ok(EvalSummary {
            map50: at50.mean_ap()?,
            map50_95: map50_95(dets, gts)?,
            at50,
        })
    }

    /// AP50 per class id `0..num_classes`; `None` for classes without ground truth.
    pub fn ap50_by_class(&self, num_classes: usize) -> Vec<Option<f64>> {
        (0..num_classes).map(|c| self.at50.ap_of(c)).collect()
    }
}
