//! One-line-per-object normalized label records:
//! `class center_x center_y width height`, each in `[0,1]` with six decimals.

use super::{DatasetError, Result};
use crate::geometry::PixelBox;
use crate::scenario::AnnotatedFrame;

/// Every box is the single class 0.
pub fn write_labels_for_boxes<'a>(
    boxes: impl IntoIterator<Item = &'a PixelBox<f64>>,
    width: u32,
    height: u32,
) -> String {
    let (w, h) = (f64::from(width), f64::from(height));
    boxes
        .into_iter()
        .map(|b| {
            let (cx, cy) = b.center();
            format!("0 {:.6} {:.6} {:.6} {:.6}", cx / w, cy / h, b.width() / w, b.height() / h)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Label record for a frame; lines are `\n`-separated with no trailing
/// newline, and an empty frame gives `""`.
pub fn write_labels_normalized(frame: &AnnotatedFrame) -> String {
    write_labels_for_boxes(frame.boxes.iter().map(|b| &b.bbox), frame.image_width, frame.image_height)
}

/// Parses a label record back into `(class, pixel box)` pairs.
pub fn parse_labels_normalized(text: &str, width: u32, height: u32) -> Result<Vec<(usize, PixelBox<f64>)>> {
    let (w, h) = (f64::from(width), f64::from(height));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DatasetError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: usize = fields[0].parse().map_err(|_| err(format!("bad class '{}'", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&fields[1..]) {
            *slot = s.parse().map_err(|_| err(format!("bad number '{s}'")))?;
            if !(0.0..=1.0).contains(slot) {
                return Err(err(format!("value {s} outside [0,1]")));
            }
        }
        let [cx, cy, bw, bh] = v;
        let b = PixelBox::new((cx - bw / 2.0) * w, (cy - bh / 2.0) * h, (cx + bw / 2.0) * w, (cy + bh / 2.0) * h)
            .map_err(|e| err(e.to_string()))?;
        out.push((class, b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{FrameBox, ModelId, SceneId};
    use proptest::prelude::*;

    fn frame(boxes: Vec<PixelBox<f64>>) -> AnnotatedFrame {
        AnnotatedFrame {
            id: "f".into(),
            frame_index: 0,
            camera_index: 0,
            image_width: 640,
            image_height: 640,
            scene_id: SceneId::Street,
            seed: 0,
            boxes: boxes.into_iter().map(|bbox| FrameBox { bbox, model_id: ModelId::QuadSmall }).collect(),
        }
    }

    #[test]
    fn centered_box_record() {
        let f = frame(vec![PixelBox::new(288.0, 288.0, 352.0, 352.0).unwrap()]);
        assert_eq!(write_labels_normalized(&f), "0 0.500000 0.500000 0.100000 0.100000");
    }

    #[test]
    fn empty_frame_record() {
        assert_eq!(write_labels_normalized(&frame(vec![])), "");
        assert!(parse_labels_normalized("", 640, 640).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(matches!(parse_labels_normalized("0 0.5 0.5 0.1", 10, 10), Err(DatasetError::Parse { line: 1, .. })));
        assert!(parse_labels_normalized("0 0.5 0.5 0.1 x", 10, 10).is_err());
        assert!(parse_labels_normalized("0 0.5 0.5 0.1 1.5", 10, 10).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(
            raw in proptest::collection::vec((0.0f64..600.0, 0.0f64..600.0, 0.1f64..40.0, 0.1f64..40.0), 0..8),
            (w, h) in (64u32..2000, 64u32..2000),
        ) {
            let boxes: Vec<_> = raw
                .iter()
                .map(|&(x, y, bw, bh)| {
                    let (x, y) = (x.min(f64::from(w) - bw), y.min(f64::from(h) - bh));
                    PixelBox::new(x.max(0.0), y.max(0.0), (x + bw).min(f64::from(w)), (y + bh).min(f64::from(h))).unwrap()
                })
                .collect();
            let mut f = frame(boxes.clone());
            f.image_width = w;
            f.image_height = h;
            let parsed = parse_labels_normalized(&write_labels_normalized(&f), w, h).unwrap();
            prop_assert_eq!(parsed.len(), boxes.len());
            for ((class, p), b) in parsed.iter().zip(&boxes) {
                prop_assert_eq!(*class, 0);
                let norm = |v: f64, s: u32| v / f64::from(s);
                // Centre and size each quantized to 5e-7; corners combine two.
                prop_assert!((norm(p.x_min, w) - norm(b.x_min, w)).abs() <= 1e-6 + 1e-12);
                prop_assert!((norm(p.x_max, w) - norm(b.x_max, w)).abs() <= 1e-6 + 1e-12);
                prop_assert!((norm(p.y_min, h) - norm(b.y_min, h)).abs() <= 1e-6 + 1e-12);
                prop_assert!((norm(p.y_max, h) - norm(b.y_max, h)).abs() <= 1e-6 + 1e-12);
            }
        }
    }
}
