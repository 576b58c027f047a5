use image::imageops::FilterType;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{HEAD_CHANNELS, INPUT_CHANNELS, INPUT_SIZE, LEVEL_STRIDES};
use super::{FeatureMap, FusionError, Result, ToyModel};
use crate::evalkit::{size_stratified_report, ApReport, Detection, GroundTruth, OutsideBin, SizeBins};
use crate::geometry::PixelBox;
use crate::scenario::{composite_image, AnnotatedFrame, Assets};
use crate::Scalar;

/// Regression targets for one pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTargets<T> {
    pub grid: usize,
    /// 1 on the cell holding a box centre, else 0.
    pub obj: Vec<T>,
    /// Channel-major `(4, grid, grid)`: centre offset within the cell and
    /// size relative to the input.
    pub boxes: Vec<T>,
}

/// One training or evaluation image at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image_id: String,
    pub image: FeatureMap<T>,
    /// Resolution the ground truth is expressed in.
    pub source_size: (u32, u32),
    pub gt: Vec<PixelBox<T>>,
    pub targets: [LevelTargets<T>; 3],
}

/// Pyramid level supervising a box whose longer side (in model input
/// pixels) is `side`.
pub fn level_for<T: Scalar>(side: T) -> usize {
    if side <= T::lit(16.0) {
        0
    } else if side <= T::lit(32.0) {
        1
    } else {
        2
    }
}

pub fn build_targets<T: Scalar>(boxes: &[PixelBox<T>]) -> [LevelTargets<T>; 3] {
    let mut levels = LEVEL_STRIDES.map(|s| {
        let g = INPUT_SIZE / s;
        LevelTargets { grid: g, obj: vec![T::zero(); g * g], boxes: vec![T::zero(); 4 * g * g] }
    });
    let input = T::from_usize_lossy(INPUT_SIZE);
    for b in boxes {
        let l = level_for(b.width().max(b.height()));
        let stride = T::from_usize_lossy(LEVEL_STRIDES[l]);
        let lv = &mut levels[l];
        let (cx, cy) = b.center();
        let cell = |v: T| (v / stride).floor().max(T::zero()).to_usize().unwrap_or(0).min(lv.grid - 1);
        let (gx, gy) = (cell(cx), cell(cy));
        let idx = gy * lv.grid + gx;
        let cells = lv.grid * lv.grid;
        lv.obj[idx] = T::one();
        lv.boxes[idx] = cx / stride - T::from_usize_lossy(gx);
        lv.boxes[cells + idx] = cy / stride - T::from_usize_lossy(gy);
        lv.boxes[2 * cells + idx] = b.width() / input;
        lv.boxes[3 * cells + idx] = b.height() / input;
    }
    levels
}

impl<T: Scalar> Sample<T> {
    /// `gt` is in source coordinates; targets use the model-input scale.
    pub fn new(image_id: impl Into<String>, image: FeatureMap<T>, source_size: (u32, u32), gt: Vec<PixelBox<T>>) -> Result<Self> {
        if image.shape() != [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] {
            return Err(FusionError::Shape(format!("sample image must be 3x64x64, got {:?}", image.shape())));
        }
        if source_size.0 == 0 || source_size.1 == 0 {
            return Err(FusionError::Data("source size must be positive".into()));
        }
        let input = T::from_usize_lossy(INPUT_SIZE);
        let (sx, sy) = (input / T::lit(f64::from(source_size.0)), input / T::lit(f64::from(source_size.1)));
        let scaled: Vec<PixelBox<T>> = gt
            .iter()
            .filter_map(|b| PixelBox::new(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy).ok())
            .collect();
        let targets = build_targets(&scaled);
        Ok(Self { image_id: image_id.into(), image, source_size, gt, targets })
    }

    /// Resizes an RGB image to the model input and scales values to `[0, 1]`.
    pub fn from_rgb(image_id: impl Into<String>, img: &RgbImage, gt: Vec<PixelBox<T>>) -> Result<Self> {
        let small = image::imageops::resize(img, INPUT_SIZE as u32, INPUT_SIZE as u32, FilterType::Triangle);
        let n = INPUT_SIZE * INPUT_SIZE;
        let mut data = vec![T::zero(); INPUT_CHANNELS * n];
        for (i, px) in small.pixels().enumerate() {
            for c in 0..INPUT_CHANNELS {
                data[c * n + i] = T::lit(f64::from(px.0[c]) / 255.0);
            }
        }
        let image = FeatureMap::from_vec(INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE, data)?;
        Self::new(image_id, image, img.dimensions(), gt)
    }
}

/// Renders each frame with `assets` and converts it to a sample.
pub fn samples_from_frames<T: Scalar>(frames: &[AnnotatedFrame], assets: &Assets) -> Result<Vec<Sample<T>>> {
    frames
        .par_iter()
        .map(|f| {
            let img = composite_image(f, assets).map_err(|e| FusionError::Data(e.to_string()))?;
            let gt = f.boxes.iter().map(|b| b.bbox.cast()).collect();
            Sample::from_rgb(f.id.clone(), &img, gt)
        })
        .collect()
}

/// Head outputs to detections in source coordinates; cells whose
/// objectness is below `min_conf` are skipped.
pub fn decode<T: Scalar>(outputs: &[FeatureMap<T>; 3], image_id: &str, source_size: (u32, u32), min_conf: T) -> Vec<Detection<T>> {
    let input = T::from_usize_lossy(INPUT_SIZE);
    let (sw, sh) = (T::lit(f64::from(source_size.0)), T::lit(f64::from(source_size.1)));
    let (sx, sy) = (sw / input, sh / input);
    let mut out = Vec::new();
    for (l, o) in outputs.iter().enumerate() {
        let [c, g, _] = o.shape();
        debug_assert_eq!(c, HEAD_CHANNELS);
        let stride = T::from_usize_lossy(LEVEL_STRIDES[l]);
        for gy in 0..g {
            for gx in 0..g {
                let conf = o.at(0, gy, gx).max(T::zero()).min(T::one());
                if !(conf >= min_conf) || conf <= T::zero() {
                    continue;
                }
                let cx = (T::from_usize_lossy(gx) + o.at(1, gy, gx)) * stride;
                let cy = (T::from_usize_lossy(gy) + o.at(2, gy, gx)) * stride;
                let (w, h) = (o.at(3, gy, gx) * input, o.at(4, gy, gx) * input);
                if !(w > T::zero() && h > T::zero()) {
                    continue;
                }
                let half = T::lit(0.5);
                let Ok(b) = PixelBox::new((cx - half * w) * sx, (cy - half * h) * sy, (cx + half * w) * sx, (cy + half * h) * sy) else {
                    continue;
                };
                let Some(b) = b.clip(sw, sh) else { continue };
                if let Ok(d) = Detection::new(image_id, b, conf) {
                    out.push(d);
                }
            }
        }
    }
    out
}

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.05;

/// Detections of `model` on every sample.
pub fn predict<T: Scalar>(model: &ToyModel<T>, samples: &[Sample<T>]) -> Result<Vec<Detection<T>>> {
    let per: Vec<Result<Vec<Detection<T>>>> = samples
        .par_iter()
        .map(|s| {
            let t = model.forward(&s.image)?;
            Ok(decode(&t.outputs, &s.image_id, s.source_size, T::lit(DEFAULT_MIN_CONFIDENCE)))
        })
        .collect();
    Ok(per.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

pub fn ground_truth<T: Scalar>(samples: &[Sample<T>]) -> GroundTruth<T> {
    samples.iter().map(|s| (s.image_id.clone(), s.gt.clone())).collect()
}

pub fn evaluate<T: Scalar>(
    model: &ToyModel<T>,
    samples: &[Sample<T>],
    bins: &SizeBins<T>,
    threshold: T,
    mode: OutsideBin,
) -> Result<ApReport<T>> {
    let dets = predict(model, samples)?;
    Ok(size_stratified_report(&dets, &ground_truth(samples), bins, threshold, mode))
}
