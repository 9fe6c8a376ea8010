//! Detection scoring: IoU, greedy matching, precision/recall, per-class average precision
//! and mAP over a sweep of IoU thresholds.
//!
//! Matching is per image. Detections are visited by descending score (ties keep input
//! order) and each claims the highest-IoU unclaimed ground truth of its class whose IoU is
//! at least the threshold (ties go to the lower ground-truth index). Average precision is
//! the exact area under the monotone precision envelope of the PR curve built from all
//! images' detections of one class, ranked by score.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::boxes::{BBox, Detection, GroundTruth};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DetectError {
    #[error("class {0} has no ground-truth boxes")]
    NoGroundTruth(usize),
    #[error("IoU threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("threshold list is empty")]
    NoThresholds,
    #[error("invalid threshold range {0:?}; expected start:step:end")]
    Range(String),
}

/// Intersection over union; 0 for disjoint boxes, 1 for identical ones.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    /// TP / (TP + FP); 0 when nothing was detected.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// TP / (TP + FN); 0 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &MatchCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &MatchCounts) -> f64 {
    c.recall()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub counts: MatchCounts,
    /// TP flag per detection, in input order.
    pub is_tp: Vec<bool>,
    /// Ground-truth index claimed by each detection, in input order.
    pub matched_gt: Vec<Option<usize>>,
}

/// Indices of `dets` by descending score, stable for ties.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()));
    order
}

/// Greedy one-to-one matching of one image's detections against its ground truth.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Matching {
    let mut claimed = vec![false; gts.len()];
    let mut is_tp = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    for d in score_order(dets) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] || gt.class_id != det.class_id {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            if overlap >= iou_thresh && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            is_tp[d] = true;
            matched_gt[d] = Some(g);
        }
    }
    let tp = is_tp.iter().filter(|&&t| t).count();
    Matching {
        counts: MatchCounts {
            tp,
            fp: dets.len() - tp,
            fn_: gts.len() - tp,
        },
        is_tp,
        matched_gt,
    }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

impl ImageEval {
    pub fn new(detections: Vec<Detection>, ground_truths: Vec<GroundTruth>) -> Self {
        Self {
            detections,
            ground_truths,
        }
    }

    fn of_class(&self, class_id: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
        (
            self.detections.iter().filter(|d| d.class_id == class_id).copied().collect(),
            self.ground_truths.iter().filter(|g| g.class_id == class_id).copied().collect(),
        )
    }
}

/// Sorted class ids that have at least one ground-truth box.
pub fn classes_with_ground_truth(images: &[ImageEval]) -> Vec<usize> {
    images
        .iter()
        .flat_map(|im| im.ground_truths.iter().map(|g| g.class_id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall after each detection in rank order; recall is non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub counts: MatchCounts,
}

impl PrCurve {
    /// Exact area under the interpolated (monotone non-increasing) precision envelope
    /// over recall in [0, 1]; precision is taken as 0 past the last recall reached.
    pub fn area(&self) -> f64 {
        let mut area = 0.0;
        let mut envelope = 0.0f64;
        let mut right = None::<f64>;
        for p in self.points.iter().rev() {
            if let Some(r) = right {
                area += (r - p.recall) * envelope;
            }
            envelope = envelope.max(p.precision);
            right = Some(p.recall);
        }
        if let Some(r) = right {
            area += r * envelope;
        }
        area
    }
}

fn check_threshold(t: f64) -> Result<(), DetectError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(DetectError::Threshold(t))
    }
}

/// PR curve of one class at one IoU threshold across all images.
pub fn pr_curve(images: &[ImageEval], class_id: usize, iou_thresh: f64) -> Result<PrCurve, DetectError> {
    check_threshold(iou_thresh)?;
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut counts = MatchCounts::default();
    for image in images {
        let (dets, gts) = image.of_class(class_id);
        let m = match_detections(&dets, &gts, iou_thresh);
        counts += m.counts;
        ranked.extend(dets.iter().zip(&m.is_tp).map(|(d, &tp)| (d.score(), tp)));
    }
    let n_gt = counts.tp + counts.fn_;
    if n_gt == 0 {
        return Err(DetectError::NoGroundTruth(class_id));
    }
    // stable: equal scores keep image order, then in-image order
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let points = ranked
        .iter()
        .enumerate()
        .map(|(i, &(_, is_tp))| {
            tp += is_tp as usize;
            PrPoint {
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (i + 1) as f64,
            }
        })
        .collect();
    Ok(PrCurve { points, counts })
}

pub fn average_precision(images: &[ImageEval], class_id: usize, iou_thresh: f64) -> Result<f64, DetectError> {
    Ok(pr_curve(images, class_id, iou_thresh)?.area())
}

/// `start:step:end`, inclusive of both ends.
pub fn threshold_range(start: f64, step: f64, end: f64) -> Result<Vec<f64>, DetectError> {
    let bad = || DetectError::Range(format!("{start}:{step}:{end}"));
    if !(step > 0.0 && end >= start && start.is_finite() && end.is_finite()) {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    let out: Vec<f64> = (0..n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect();
    for &t in &out {
        check_threshold(t)?;
    }
    Ok(out)
}

/// The 0.5:0.05:0.95 sweep (ten thresholds).
pub fn coco_thresholds() -> Vec<f64> {
    threshold_range(0.5, 0.05, 0.95).expect("static range is valid")
}

/// Parses `"0.5:0.05:0.95"`, `"0.5,0.75"` or a single value.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>, DetectError> {
    let bad = || DetectError::Range(text.to_string());
    let text = text.trim();
    let out = if text.contains(':') {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            [start, step, end] => threshold_range(*start, *step, *end)?,
            _ => return Err(bad()),
        }
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?
    };
    if out.is_empty() {
        return Err(DetectError::NoThresholds);
    }
    for &t in &out {
        check_threshold(t)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// AP averaged over thresholds.
    pub ap: f64,
    pub ap_per_threshold: Vec<f64>,
    pub gt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdMap {
    pub iou: f64,
    pub map: f64,
    /// Counts pooled over classes.
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mAP50")]
    pub map50: Option<f64>,
    #[serde(rename = "mAP75")]
    pub map75: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub per_threshold: Vec<ThresholdMap>,
}

const THRESHOLD_EPS: f64 = 1e-9;

/// AP averaged over `classes` at each threshold, then over thresholds.
pub fn mean_ap(images: &[ImageEval], classes: &[usize], thresholds: &[f64]) -> Result<MapReport, DetectError> {
    if thresholds.is_empty() {
        return Err(DetectError::NoThresholds);
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    let mut table = vec![vec![0.0; thresholds.len()]; classes.len()];
    let mut gt_counts = vec![0; classes.len()];
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for (ti, &t) in thresholds.iter().enumerate() {
        let mut pooled = MatchCounts::default();
        for (ci, &class_id) in classes.iter().enumerate() {
            let curve = pr_curve(images, class_id, t)?;
            table[ci][ti] = curve.area();
            gt_counts[ci] = curve.counts.tp + curve.counts.fn_;
            pooled += curve.counts;
        }
        let map = if classes.is_empty() {
            0.0
        } else {
            table.iter().map(|row| row[ti]).sum::<f64>() / classes.len() as f64
        };
        per_threshold.push(ThresholdMap {
            iou: t,
            map,
            counts: pooled,
        });
    }
    let map = per_threshold.iter().map(|p| p.map).sum::<f64>() / thresholds.len() as f64;
    let slice = |target: f64| {
        per_threshold
            .iter()
            .find(|p| (p.iou - target).abs() < THRESHOLD_EPS)
            .map(|p| p.map)
    };
    let per_class = classes
        .iter()
        .zip(table)
        .zip(gt_counts)
        .map(|((&class_id, aps), gt_count)| ClassAp {
            class_id,
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap_per_threshold: aps,
            gt_count,
        })
        .collect();
    Ok(MapReport {
        map,
        map50: slice(0.5),
        map75: slice(0.75),
        per_class,
        per_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BBox, class_id: usize, score: f64) -> Detection {
        Detection::new(b, class_id, score).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &bb(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &bb(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn perfect_and_silent_detectors() {
        let g = bb(10.0, 10.0, 20.0, 20.0);
        let m = match_detections(&[det(g, 0, 0.9)], &[GroundTruth::new(g, 0)], 0.5);
        assert_eq!(m.counts, MatchCounts { tp: 1, fp: 0, fn_: 0 });

        let gts: Vec<_> = (0..3).map(|i| GroundTruth::new(bb(i as f64 * 30.0, 0.0, 10.0, 10.0), 0)).collect();
        let m = match_detections(&[], &gts, 0.5);
        assert_eq!(m.counts, MatchCounts { tp: 0, fp: 0, fn_: 3 });
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        // gt (0,0,10,10), det (0,0,10,6): inter 60, union 100 → IoU 0.6
        let gt = GroundTruth::new(bb(0.0, 0.0, 10.0, 10.0), 0);
        let d = bb(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&d, &gt.bbox) - 0.6).abs() < 1e-15);
        let dets = [det(d, 0, 0.8), det(d, 0, 0.9)];
        let m = match_detections(&dets, &[gt], 0.5);
        assert_eq!(m.counts, MatchCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(m.is_tp, vec![false, true]);
        assert_eq!(m.matched_gt, vec![None, Some(0)]);
    }

    #[test]
    fn class_mismatch_never_matches() {
        let g = bb(0.0, 0.0, 5.0, 5.0);
        let m = match_detections(&[det(g, 1, 0.9)], &[GroundTruth::new(g, 0)], 0.5);
        assert_eq!(m.counts, MatchCounts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn precision_recall_conventions() {
        let c = MatchCounts { tp: 1, fp: 0, fn_: 0 };
        assert_eq!((precision(&c), recall(&c)), (1.0, 1.0));
        let c = MatchCounts { tp: 1, fp: 1, fn_: 1 };
        assert_eq!((precision(&c), recall(&c)), (0.5, 0.5));
        let c = MatchCounts { tp: 0, fp: 0, fn_: 2 };
        assert_eq!((precision(&c), recall(&c)), (0.0, 0.0));
    }

    fn four_detection_fixture() -> ImageEval {
        let gts: Vec<_> = (0..3)
            .map(|i| GroundTruth::new(bb(i as f64 * 100.0, 0.0, 50.0, 50.0), 0))
            .collect();
        let dets = vec![
            det(gts[0].bbox, 0, 0.9),
            det(bb(400.0, 400.0, 10.0, 10.0), 0, 0.8),
            det(gts[1].bbox, 0, 0.7),
            det(gts[2].bbox, 0, 0.6),
        ];
        ImageEval::new(dets, gts)
    }

    #[test]
    fn ap_perfect_empty_and_mixed() {
        let perfect = ImageEval::new(
            vec![det(bb(0.0, 0.0, 4.0, 4.0), 0, 0.3)],
            vec![GroundTruth::new(bb(0.0, 0.0, 4.0, 4.0), 0)],
        );
        assert_eq!(average_precision(&[perfect], 0, 0.5).unwrap(), 1.0);

        let only_fp = ImageEval::new(
            vec![det(bb(50.0, 50.0, 4.0, 4.0), 0, 0.3)],
            vec![GroundTruth::new(bb(0.0, 0.0, 4.0, 4.0), 0)],
        );
        assert_eq!(average_precision(&[only_fp], 0, 0.5).unwrap(), 0.0);

        // PR after each rank: (1/3, 1), (1/3, 1/2), (2/3, 2/3), (1, 3/4).
        // Envelope: 1 on (0, 1/3], 3/4 on (1/3, 1] → 1/3 + 2/3 * 3/4 = 5/6.
        let ap = average_precision(&[four_detection_fixture()], 0, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn ap_requires_ground_truth() {
        let im = ImageEval::new(vec![det(bb(0.0, 0.0, 1.0, 1.0), 1, 0.5)], vec![]);
        assert_eq!(average_precision(&[im], 1, 0.5), Err(DetectError::NoGroundTruth(1)));
    }

    #[test]
    fn thresholds() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
        assert_eq!(parse_thresholds("0.5:0.05:0.95").unwrap(), t);
        assert_eq!(parse_thresholds("0.5, 0.75").unwrap(), vec![0.5, 0.75]);
        assert_eq!(parse_thresholds("0.6").unwrap(), vec![0.6]);
        assert!(parse_thresholds("0.5:0.05").is_err());
        assert!(parse_thresholds("1.0").is_err());
        assert!(parse_thresholds("abc").is_err());
    }

    #[test]
    fn mean_ap_two_classes() {
        // class 0 perfect, class 1 AP 0.5 (one FP ranked above its only TP)
        let g0 = bb(0.0, 0.0, 10.0, 10.0);
        let g1 = bb(50.0, 50.0, 10.0, 10.0);
        let im = ImageEval::new(
            vec![
                det(g0, 0, 0.9),
                det(bb(200.0, 200.0, 5.0, 5.0), 1, 0.8),
                det(g1, 1, 0.7),
            ],
            vec![GroundTruth::new(g0, 0), GroundTruth::new(g1, 1)],
        );
        let r = mean_ap(&[im], &[0, 1], &[0.5]).unwrap();
        assert!((r.map - 0.75).abs() < 1e-12);
        assert_eq!(r.map50, Some(r.map));
        assert_eq!(r.map75, None);
        assert_eq!(r.per_class[1].ap, 0.5);
    }

    #[test]
    fn mean_ap_perfect_over_sweep() {
        let images: Vec<_> = (0..4)
            .map(|i| {
                let g = bb(i as f64, 2.0 * i as f64, 10.0 + i as f64, 7.0);
                ImageEval::new(vec![det(g, i % 2, 0.5)], vec![GroundTruth::new(g, i % 2)])
            })
            .collect();
        let r = mean_ap(&images, &classes_with_ground_truth(&images), &coco_thresholds()).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.per_threshold.iter().all(|p| p.map == 1.0));
        assert_eq!(r.map50, Some(1.0));
        assert_eq!(r.map75, Some(1.0));
    }

    #[test]
    fn empty_detections_give_zero() {
        let images = vec![ImageEval::new(vec![], vec![GroundTruth::new(bb(0.0, 0.0, 3.0, 3.0), 0)])];
        let r = mean_ap(&images, &[0], &coco_thresholds()).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.per_threshold[0].counts.fn_, 1);
    }
}
