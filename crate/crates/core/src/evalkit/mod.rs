//! Single-class detection evaluation.
//!
//! A detection is a true positive when its IoU with a not-yet-claimed
//! ground truth reaches the threshold (0.5 by default). Precision/recall
//! pairs are swept over the distinct confidences, and AP is the mean of the
//! interpolated precision at recall `0, 0.1, …, 1`.

mod report;

pub use report::{
    REPORT_COLUMNS,
    format_detections, parse_detections, size_stratified_report, ApReport, GroundTruth, OutsideBin, SizeBins,
};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelBox;
use crate::Scalar;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("box has zero area: ({x_min}, {y_min}, {x_max}, {y_max})")]
    ZeroArea { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("recall is undefined without ground truths")]
    NoGroundTruth,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn zero_area<T: Scalar>(b: &PixelBox<T>) -> EvalError {
    EvalError::ZeroArea {
        x_min: b.x_min.as_f64(),
        y_min: b.y_min.as_f64(),
        x_max: b.x_max.as_f64(),
        y_max: b.y_max.as_f64(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub image_id: String,
    pub bbox: PixelBox<T>,
    pub confidence: T,
}

impl<T: Scalar> Detection<T> {
    pub fn new(image_id: impl Into<String>, bbox: PixelBox<T>, confidence: T) -> Result<Self> {
        if !(confidence >= T::zero() && confidence <= T::one()) {
            return Err(EvalError::InvalidConfidence(confidence.as_f64()));
        }
        if !(bbox.area() > T::zero()) {
            return Err(zero_area(&bbox));
        }
        Ok(Self { image_id: image_id.into(), bbox, confidence })
    }
}

/// Intersection over union, 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &PixelBox<T>, b: &PixelBox<T>) -> Result<T> {
    for bx in [a, b] {
        if !(bx.area() > T::zero()) {
            return Err(zero_area(bx));
        }
    }
    Ok(overlap(a, b))
}

fn overlap<T: Scalar>(a: &PixelBox<T>, b: &PixelBox<T>) -> T {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(T::zero());
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > T::zero() {
        (inter / union).min(T::one())
    } else {
        T::zero()
    }
}

/// Per-image matching outcome, indexed like the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult<T> {
    pub confidences: Vec<T>,
    pub is_tp: Vec<bool>,
    /// Ground-truth index claimed by each detection.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    pub threshold: T,
}

impl<T: Scalar> MatchResult<T> {
    pub fn tp_count(&self) -> usize {
        self.is_tp.iter().filter(|&&t| t).count()
    }
}

/// Detection indices by descending confidence, input order breaking ties.
pub(crate) fn confidence_order<T: Scalar>(conf: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy matching: in descending confidence, each detection claims the
/// unclaimed ground truth of highest IoU (lowest index on ties) if that
/// IoU is at least `threshold`.
pub fn match_detections<T: Scalar>(dets: &[Detection<T>], gts: &[PixelBox<T>], threshold: T) -> MatchResult<T> {
    let confidences: Vec<T> = dets.iter().map(|d| d.confidence).collect();
    let mut is_tp = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in confidence_order(&confidences) {
        let mut best: Option<(usize, T)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let v = overlap(&dets[i].bbox, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= threshold {
                gt_matched[j] = true;
                is_tp[i] = true;
                matched_gt[i] = Some(j);
            }
        }
    }
    MatchResult { confidences, is_tp, matched_gt, gt_matched, threshold }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint<T> {
    pub threshold: T,
    pub precision: T,
    pub recall: T,
}

/// Operating points ordered by descending confidence threshold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve<T> {
    pub points: Vec<PrPoint<T>>,
}

/// Builds the curve from scored `(confidence, is_tp)` pairs.
pub fn pr_curve_from_scored<T: Scalar>(scored: &[(T, bool)], total_gt: usize) -> Result<PrCurve<T>> {
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let conf: Vec<T> = scored.iter().map(|s| s.0).collect();
    let order = confidence_order(&conf);
    let total = T::from_usize_lossy(total_gt);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&n| conf[n] != conf[i]);
        if last_of_group {
            points.push(PrPoint {
                threshold: conf[i],
                precision: T::from_usize_lossy(tp) / T::from_usize_lossy(tp + fp),
                recall: T::from_usize_lossy(tp) / total,
            });
        }
    }
    Ok(PrCurve { points })
}

/// Precision/recall over every image's matches; recall is relative to
/// `total_gt`.
pub fn pr_curve<T: Scalar>(results: &[MatchResult<T>], total_gt: usize) -> Result<PrCurve<T>> {
    let scored: Vec<(T, bool)> = results
        .iter()
        .flat_map(|r| r.confidences.iter().copied().zip(r.is_tp.iter().copied()))
        .collect();
    pr_curve_from_scored(&scored, total_gt)
}

/// Highest precision among operating points with recall at least `r`.
pub fn interp_precision<T: Scalar>(curve: &PrCurve<T>, r: T) -> T {
    curve
        .points
        .iter()
        .filter(|p| p.recall >= r)
        .map(|p| p.precision)
        .fold(T::zero(), T::max)
}

/// Recall levels `k/10` for `k = 0..=10`; each is the correctly rounded
/// quotient, so it compares exactly against recalls like `3/10` or `6/20`.
pub fn recall_levels<T: Scalar>() -> [T; 11] {
    std::array::from_fn(|k| T::from_usize_lossy(k) / T::lit(10.0))
}

/// Eleven-point interpolated average precision.
pub fn average_precision<T: Scalar>(curve: &PrCurve<T>) -> T {
    let sum: T = recall_levels::<T>().iter().map(|&r| interp_precision(curve, r)).sum();
    sum / T::lit(11.0)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Test-only references written without the production code paths.
    use crate::geometry::PixelBox;

    /// Exhaustive threshold enumeration: for every candidate threshold the
    /// TP/FP counts are recounted from scratch.
    pub fn brute_force_ap(scored: &[(f64, bool)], total_gt: usize) -> f64 {
        let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        let ops: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&beta| {
                let kept: Vec<&(f64, bool)> = scored.iter().filter(|s| s.0 >= beta).collect();
                let tp = kept.iter().filter(|s| s.1).count();
                (tp as f64 / kept.len() as f64, tp as f64 / total_gt as f64)
            })
            .collect();
        let mut sum = 0.0;
        for k in 0..=10 {
            let r = k as f64 / 10.0;
            let mut best = 0.0f64;
            for &(p, rec) in &ops {
                if rec >= r && p > best {
                    best = p;
                }
            }
            sum += best;
        }
        sum / 11.0
    }

    /// Straightforward greedy reference on plain arrays.
    pub fn greedy(dets: &[([f64; 4], f64)], gts: &[[f64; 4]], thr: f64) -> Vec<bool> {
        greedy_assign(dets, gts, thr).iter().map(Option::is_some).collect()
    }

    /// Ground-truth index claimed by each detection.
    pub fn greedy_assign(dets: &[([f64; 4], f64)], gts: &[[f64; 4]], thr: f64) -> Vec<Option<usize>> {
        fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
            let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
            let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
            let i = ix * iy;
            i / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i)
        }
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        // Stable insertion sort by descending confidence.
        for i in 1..idx.len() {
            let mut j = i;
            while j > 0 && dets[idx[j - 1]].1 < dets[idx[j]].1 {
                idx.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut taken = vec![false; gts.len()];
        let mut tp = vec![None; dets.len()];
        for &d in &idx {
            let mut best = -1.0;
            let mut best_j = usize::MAX;
            for (j, g) in gts.iter().enumerate() {
                if !taken[j] {
                    let v = iou(&dets[d].0, g);
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
            }
            if best_j != usize::MAX && best >= thr {
                taken[best_j] = true;
                tp[d] = Some(best_j);
            }
        }
        tp
    }

    /// IoU by counting unit cells of the integer grid.
    pub fn raster_iou(a: &PixelBox<f64>, b: &PixelBox<f64>) -> f64 {
        let (x0, y0) = (a.x_min.min(b.x_min) as i64, a.y_min.min(b.y_min) as i64);
        let (x1, y1) = (a.x_max.max(b.x_max) as i64, a.y_max.max(b.y_max) as i64);
        let (mut inter, mut union) = (0u64, 0u64);
        for y in y0..y1 {
            for x in x0..x1 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let ina = cx > a.x_min && cx < a.x_max && cy > a.y_min && cy < a.y_max;
                let inb = cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max;
                inter += u64::from(ina && inb);
                union += u64::from(ina || inb);
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> PixelBox<f64> {
        PixelBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bx: PixelBox<f64>, c: f64) -> Detection<f64> {
        Detection::new("img", bx, c).unwrap()
    }

    #[test]
    fn iou_basics() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let v = iou(&a, &b(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        assert_eq!(raster_iou(&a, &b(5.0, 5.0, 15.0, 15.0)), 25.0 / 175.0);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert!(matches!(iou(&a, &b(3.0, 3.0, 3.0, 9.0)), Err(EvalError::ZeroArea { .. })));
    }

    #[test]
    fn iou_single_precision() {
        let a = PixelBox::<f32>::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let c = PixelBox::<f32>::new(5.0, 5.0, 15.0, 15.0).unwrap();
        assert!((iou(&a, &c).unwrap() - 25.0 / 175.0).abs() < 1e-6);
    }

    #[test]
    fn detection_validation() {
        assert!(Detection::new("x", b(0.0, 0.0, 1.0, 1.0), 1.5).is_err());
        assert!(Detection::new("x", b(0.0, 0.0, 0.0, 1.0), 0.5).is_err());
    }

    #[test]
    fn exact_hit_is_tp() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[det(g, 0.7)], &[g], 0.5);
        assert_eq!(m.is_tp, vec![true]);
        assert_eq!(m.gt_matched, vec![true]);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[det(g, 0.8), det(g, 0.9)], &[g], 0.5);
        assert_eq!(m.is_tp, vec![false, true]);
    }

    #[test]
    fn confidence_tie_goes_to_first_input() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[det(g, 0.5), det(g, 0.5)], &[g], 0.5);
        assert_eq!(m.is_tp, vec![true, false]);
    }

    #[test]
    fn iou_tie_goes_to_first_ground_truth() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[det(g, 0.5)], &[g, g], 0.5);
        assert_eq!(m.matched_gt, vec![Some(0)]);
    }

    #[test]
    fn below_threshold_is_fp() {
        let m = match_detections(&[det(b(0.0, 0.0, 10.0, 10.0), 0.9)], &[b(5.0, 5.0, 15.0, 15.0)], 0.5);
        assert_eq!(m.tp_count(), 0);
    }

    #[test]
    fn greedy_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let rand_box = |rng: &mut ChaCha8Rng| {
                let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                [x, y, x + rng.random_range(2.0..15.0), y + rng.random_range(2.0..15.0)]
            };
            let gts: Vec<[f64; 4]> = (0..3).map(|_| rand_box(&mut rng)).collect();
            // Quantized confidences force ties.
            let dets: Vec<([f64; 4], f64)> =
                (0..5).map(|_| (rand_box(&mut rng), f64::from(rng.random_range(0..4u8)) / 4.0)).collect();
            let want = greedy(&dets, &gts, 0.5);
            let d: Vec<_> = dets.iter().map(|(bx, c)| det(b(bx[0], bx[1], bx[2], bx[3]), *c)).collect();
            let g: Vec<_> = gts.iter().map(|bx| b(bx[0], bx[1], bx[2], bx[3])).collect();
            let got = match_detections(&d, &g, 0.5);
            assert_eq!(got.is_tp, want);
            assert!(got.tp_count() <= d.len().min(g.len()));
        }
    }

    #[test]
    fn all_tp_curve_has_unit_precision() {
        let g: Vec<_> = (0..4).map(|i| b(20.0 * f64::from(i), 0.0, 20.0 * f64::from(i) + 10.0, 10.0)).collect();
        let d: Vec<_> = g.iter().enumerate().map(|(i, &bx)| det(bx, 0.2 * (i as f64 + 1.0))).collect();
        let curve = pr_curve(&[match_detections(&d, &g, 0.5)], 4).unwrap();
        assert!(curve.points.iter().all(|p| p.precision == 1.0));
        assert_eq!(curve.points.last().unwrap().recall, 1.0);
        assert_eq!(average_precision(&curve), 1.0);
    }

    #[test]
    fn empty_curve_scores_zero() {
        let curve = pr_curve::<f64>(&[], 3).unwrap();
        assert!(curve.points.is_empty());
        assert_eq!(average_precision(&curve), 0.0);
        assert_eq!(interp_precision(&curve, 0.0), 0.0);
    }

    #[test]
    fn missing_ground_truth_is_error() {
        assert_eq!(pr_curve::<f64>(&[], 0), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn all_fp_scores_zero() {
        let scored = [(0.9, false), (0.3, false)];
        assert_eq!(average_precision(&pr_curve_from_scored(&scored, 2).unwrap()), 0.0);
    }

    #[test]
    fn worked_two_gt_case() {
        let scored = [(0.9, true), (0.8, false), (0.7, true)];
        let oracle = brute_force_ap(&scored, 2);
        assert!((oracle - 28.0 / 33.0).abs() < 1e-15);
        let curve = pr_curve_from_scored(&scored, 2).unwrap();
        assert_eq!(curve.points.len(), 3);
        assert_eq!(interp_precision(&curve, 0.5), 1.0);
        assert!((interp_precision(&curve, 0.6) - 2.0 / 3.0).abs() < 1e-15);
        assert!((average_precision(&curve) - 28.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn interp_beyond_max_recall_is_zero() {
        let curve = pr_curve_from_scored(&[(0.9, true), (0.1, false)], 4).unwrap();
        assert_eq!(interp_precision(&curve, 0.3), 0.0);
        assert_eq!(interp_precision(&curve, 0.0), 1.0);
    }

    #[test]
    fn tied_confidences_form_one_point() {
        let curve = pr_curve_from_scored(&[(0.5, true), (0.5, false), (0.5, true)], 2).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert!((curve.points[0].precision - 2.0f64 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            a in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0),
            c in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0),
        ) {
            let ba = b(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let bc = b(c.0, c.1, c.0 + c.2, c.1 + c.3);
            let v = iou(&ba, &bc).unwrap();
            prop_assert_eq!(v, iou(&bc, &ba).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&ba, &ba).unwrap(), 1.0);
        }

        #[test]
        fn ap_matches_oracle_and_invariants(
            scored in proptest::collection::vec((0u8..20, any::<bool>()), 0..20),
            extra_gt in 0usize..5,
        ) {
            let scored: Vec<(f64, bool)> = scored.into_iter().map(|(c, t)| (f64::from(c) / 19.0, t)).collect();
            let total = scored.iter().filter(|s| s.1).count() + extra_gt;
            prop_assume!(total > 0);
            let curve = pr_curve_from_scored(&scored, total).unwrap();
            let ap = average_precision(&curve);
            prop_assert!((ap - brute_force_ap(&scored, total)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ap));
            let levels = recall_levels::<f64>();
            for w in levels.windows(2) {
                prop_assert!(interp_precision(&curve, w[1]) <= interp_precision(&curve, w[0]));
            }
            for w in curve.points.windows(2) {
                prop_assert!(w[0].threshold > w[1].threshold && w[0].recall <= w[1].recall);
            }
            let mut with_zero = scored.clone();
            with_zero.push((0.0, false));
            prop_assert!(average_precision(&pr_curve_from_scored(&with_zero, total).unwrap()) <= ap);
        }
    }
}
