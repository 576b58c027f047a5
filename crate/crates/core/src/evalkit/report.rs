//! Size-stratified AP and the detection file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{average_precision, match_detections, pr_curve_from_scored, Detection, EvalError, MatchResult, Result};
use crate::geometry::PixelBox;
use crate::Scalar;

/// Ground truths keyed by image id.
pub type GroundTruth<T> = BTreeMap<String, Vec<PixelBox<T>>>;

/// Upper area edges of the tiny, small and medium bins (right-closed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBins<T> {
    pub edges: [T; 3],
}

impl<T: Scalar> Default for SizeBins<T> {
    fn default() -> Self {
        Self { edges: [T::lit(64.0), T::lit(256.0), T::lit(1024.0)] }
    }
}

impl<T: Scalar> SizeBins<T> {
    pub fn new(edges: [T; 3]) -> std::result::Result<Self, String> {
        if edges[0] > T::zero() && edges[0] < edges[1] && edges[1] < edges[2] {
            Ok(Self { edges })
        } else {
            Err(format!("bin edges must be positive and increasing, got {edges:?}"))
        }
    }

    /// Area ranges in report column order.
    fn strata(&self) -> [(T, T); 5] {
        let [a, b, c] = self.edges;
        let inf = T::infinity();
        let neg = T::neg_infinity();
        [(neg, a), (a, b), (b, c), (neg, c), (neg, inf)]
    }
}

/// How a detection that did not land on an in-bin ground truth is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutsideBin {
    /// Match once against all ground truths. Detections claimed by an
    /// out-of-bin ground truth are dropped; unmatched detections are FP only
    /// in the bin of their own area.
    #[default]
    Ignore,
    /// Re-match every detection against the in-bin ground truths alone, so
    /// everything not claimed there is a FP.
    Count,
}

/// AP per size bin; `None` where the bin holds no ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApReport<T> {
    pub ap_0_8: Option<T>,
    pub ap_8_16: Option<T>,
    pub ap_16_32: Option<T>,
    /// Every ground truth up to the last edge.
    pub ap_0_32: Option<T>,
    /// Every ground truth regardless of size.
    pub overall: Option<T>,
}

pub const REPORT_COLUMNS: [&str; 5] = ["AP_0-8^2", "AP_8-16^2", "AP_16-32^2", "AP_0-32^2", "AP_all"];

impl<T: Scalar> ApReport<T> {
    pub fn values(&self) -> [Option<T>; 5] {
        [self.ap_0_8, self.ap_8_16, self.ap_16_32, self.ap_0_32, self.overall]
    }

    fn from_values(v: [Option<T>; 5]) -> Self {
        Self { ap_0_8: v[0], ap_8_16: v[1], ap_16_32: v[2], ap_0_32: v[3], overall: v[4] }
    }

    /// Aligned text table, one row per labelled report; `-` marks absent bins.
    pub fn table(rows: &[(String, ApReport<T>)]) -> String {
        let name_w = rows.iter().map(|r| r.0.len()).chain([7]).max().unwrap_or(7);
        let mut out = format!("{:<name_w$}", "dataset");
        for c in REPORT_COLUMNS {
            let _ = write!(out, "  {c:>10}");
        }
        out.push('\n');
        for (name, rep) in rows {
            let _ = write!(out, "{name:<name_w$}");
            for v in rep.values() {
                match v {
                    Some(x) => {
                        let _ = write!(out, "  {:>10.4}", x.as_f64());
                    }
                    None => {
                        let _ = write!(out, "  {:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn in_range<T: Scalar>(area: T, (lo, hi): (T, T)) -> bool {
    area > lo && area <= hi
}

/// Detections grouped by image, in input order within an image.
fn group_detections<'a, T: Scalar>(
    dets: &'a [Detection<T>],
    gts: &'a GroundTruth<T>,
) -> Vec<(&'a [PixelBox<T>], Vec<Detection<T>>)> {
    let mut by_image: BTreeMap<&str, Vec<Detection<T>>> = gts.keys().map(|k| (k.as_str(), Vec::new())).collect();
    for d in dets {
        by_image.entry(d.image_id.as_str()).or_default().push(d.clone());
    }
    by_image
        .into_iter()
        .map(|(id, ds)| (gts.get(id).map_or(&[][..], Vec::as_slice), ds))
        .collect()
}

/// AP for each size bin plus the small-overall and all-size columns.
pub fn size_stratified_report<T: Scalar>(
    dets: &[Detection<T>],
    gts: &GroundTruth<T>,
    bins: &SizeBins<T>,
    threshold: T,
    mode: OutsideBin,
) -> ApReport<T> {
    let images = group_detections(dets, gts);
    let strata = bins.strata();
    let full: Vec<MatchResult<T>> = match mode {
        OutsideBin::Ignore => images.par_iter().map(|(g, d)| match_detections(d, g, threshold)).collect(),
        OutsideBin::Count => Vec::new(),
    };
    let values = strata.map(|range| {
        let total: usize = images.iter().map(|(g, _)| g.iter().filter(|b| in_range(b.area(), range)).count()).sum();
        if total == 0 {
            return None;
        }
        let scored: Vec<(T, bool)> = match mode {
            OutsideBin::Ignore => images
                .iter()
                .zip(&full)
                .flat_map(|((g, d), m)| {
                    d.iter().enumerate().filter_map(move |(i, det)| match m.matched_gt[i] {
                        Some(j) => in_range(g[j].area(), range).then_some((det.confidence, true)),
                        None => in_range(det.bbox.area(), range).then_some((det.confidence, false)),
                    })
                })
                .collect(),
            OutsideBin::Count => images
                .par_iter()
                .map(|(g, d)| {
                    let kept: Vec<PixelBox<T>> = g.iter().copied().filter(|b| in_range(b.area(), range)).collect();
                    let m = match_detections(d, &kept, threshold);
                    m.confidences.into_iter().zip(m.is_tp).collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
                .concat(),
        };
        let curve = pr_curve_from_scored(&scored, total).expect("total is positive");
        Some(average_precision(&curve))
    });
    ApReport::from_values(values)
}

/// Parses `image_id class confidence x_min y_min x_max y_max` records.
/// Blank lines and `#` comments are skipped; the class token is ignored
/// since evaluation is single-class.
pub fn parse_detections<T: Scalar>(text: &str) -> Result<Vec<Detection<T>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| EvalError::Parse { line: n + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let mut nums = [0.0f64; 5];
        for (slot, tok) in nums.iter_mut().zip(&fields[2..]) {
            *slot = tok.parse().map_err(|_| err(format!("not a number: {tok:?}")))?;
        }
        let bbox = PixelBox::new(T::lit(nums[1]), T::lit(nums[2]), T::lit(nums[3]), T::lit(nums[4]))
            .map_err(|e| err(e.to_string()))?;
        let det = Detection::new(fields[0], bbox, T::lit(nums[0])).map_err(|e| err(e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}

pub fn format_detections<T: Scalar>(dets: &[Detection<T>]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            out,
            "{} uav {} {} {} {} {}",
            d.image_id,
            d.confidence.as_f64(),
            b.x_min.as_f64(),
            b.y_min.as_f64(),
            b.x_max.as_f64(),
            b.y_max.as_f64()
        );
    }
    out
}
