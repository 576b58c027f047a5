//! Procedural stand-in for a rendering engine: scene backdrops with sprites
//! alpha-composited into each labelled box.
//!
//! Asset directories use `backdrops/<scene_id>.png` and
//! `sprites/<model_id>.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage, Rgba, RgbaImage};

use super::{AnnotatedFrame, ModelId, Result, ScenarioError, SceneId};

#[derive(Debug, Clone, Default)]
pub struct Assets {
    root: Option<PathBuf>,
    backdrops: BTreeMap<SceneId, RgbImage>,
    sprites: BTreeMap<ModelId, RgbaImage>,
}

impl Assets {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Every scene backdrop (at `size`×`size`) and every model sprite.
    pub fn procedural(size: u32) -> Self {
        Self {
            root: None,
            backdrops: SceneId::ALL.iter().map(|&s| (s, procedural_backdrop(s, size, size))).collect(),
            sprites: ModelId::ALL.iter().map(|&m| (m, procedural_sprite(m, 64))).collect(),
        }
    }

    /// Loads whatever assets exist under `dir`; lookups of absent ones fail
    /// with [`ScenarioError::AssetNotFound`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut out = Self { root: Some(dir.to_path_buf()), ..Self::default() };
        for s in SceneId::ALL {
            let p = Self::backdrop_path(dir, s);
            if p.exists() {
                let img = image::open(&p).map_err(|e| ScenarioError::Image(format!("{}: {e}", p.display())))?;
                out.backdrops.insert(s, img.to_rgb8());
            }
        }
        for m in ModelId::ALL {
            let p = Self::sprite_path(dir, m);
            if p.exists() {
                let img = image::open(&p).map_err(|e| ScenarioError::Image(format!("{}: {e}", p.display())))?;
                out.sprites.insert(m, img.to_rgba8());
            }
        }
        Ok(out)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for sub in ["backdrops", "sprites"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| ScenarioError::Io(e.to_string()))?;
        }
        for (&s, img) in &self.backdrops {
            let p = Self::backdrop_path(dir, s);
            img.save(&p).map_err(|e| ScenarioError::Image(format!("{}: {e}", p.display())))?;
        }
        for (&m, img) in &self.sprites {
            let p = Self::sprite_path(dir, m);
            img.save(&p).map_err(|e| ScenarioError::Image(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }

    pub fn backdrop_path(dir: &Path, scene: SceneId) -> PathBuf {
        dir.join("backdrops").join(format!("{scene}.png"))
    }

    pub fn sprite_path(dir: &Path, model: ModelId) -> PathBuf {
        dir.join("sprites").join(format!("{model}.png"))
    }

    pub fn insert_backdrop(&mut self, scene: SceneId, img: RgbImage) {
        self.backdrops.insert(scene, img);
    }

    pub fn insert_sprite(&mut self, model: ModelId, img: RgbaImage) {
        self.sprites.insert(model, img);
    }

    fn missing(&self, kind: &'static str, name: String, path: impl FnOnce(&Path) -> PathBuf) -> ScenarioError {
        let path = match &self.root {
            Some(root) => path(root).display().to_string(),
            None => "<in-memory assets>".to_string(),
        };
        ScenarioError::AssetNotFound { kind, name, path }
    }

    pub fn backdrop(&self, scene: SceneId) -> Result<&RgbImage> {
        self.backdrops
            .get(&scene)
            .ok_or_else(|| self.missing("backdrop", scene.to_string(), |r| Self::backdrop_path(r, scene)))
    }

    pub fn sprite(&self, model: ModelId) -> Result<&RgbaImage> {
        self.sprites
            .get(&model)
            .ok_or_else(|| self.missing("sprite", model.to_string(), |r| Self::sprite_path(r, model)))
    }
}

/// Pixel indices whose centres fall in `[lo, hi)`, clipped to `[0, n)`.
fn covered(lo: f64, hi: f64, n: u32) -> std::ops::Range<u32> {
    let start = (lo - 0.5).ceil().max(0.0) as u32;
    let end = ((hi - 0.5).ceil().max(0.0) as u32).min(n);
    start.min(end)..end
}

fn blend(dst: u8, src: u8, alpha: u8) -> u8 {
    let a = u32::from(alpha);
    ((a * u32::from(src) + (255 - a) * u32::from(dst) + 127) / 255) as u8
}

/// Renders a frame: the scene backdrop (resized to the frame) with each
/// box's model sprite stretched over the pixels whose centres it covers.
pub fn composite_image(frame: &AnnotatedFrame, assets: &Assets) -> Result<RgbImage> {
    let backdrop = assets.backdrop(frame.scene_id)?;
    let (w, h) = (frame.image_width, frame.image_height);
    let mut out = if backdrop.dimensions() == (w, h) {
        backdrop.clone()
    } else {
        imageops::resize(backdrop, w, h, imageops::FilterType::Nearest)
    };
    for b in &frame.boxes {
        let sprite = assets.sprite(b.model_id)?;
        let (sw, sh) = sprite.dimensions();
        let (bw, bh) = (b.bbox.width(), b.bbox.height());
        if bw <= 0.0 || bh <= 0.0 {
            continue;
        }
        for y in covered(b.bbox.y_min, b.bbox.y_max, h) {
            let v = (((f64::from(y) + 0.5 - b.bbox.y_min) / bh * f64::from(sh)) as u32).min(sh - 1);
            for x in covered(b.bbox.x_min, b.bbox.x_max, w) {
                let u = (((f64::from(x) + 0.5 - b.bbox.x_min) / bw * f64::from(sw)) as u32).min(sw - 1);
                let Rgba([r, g, bl, a]) = *sprite.get_pixel(u, v);
                if a == 0 {
                    continue;
                }
                let dst = out.get_pixel_mut(x, y);
                *dst = Rgb([blend(dst[0], r, a), blend(dst[1], g, a), blend(dst[2], bl, a)]);
            }
        }
    }
    Ok(out)
}

fn hash2(x: u32, y: u32, salt: u32) -> u32 {
    let mut h = x.wrapping_mul(0x9E37_79B1) ^ y.wrapping_mul(0x85EB_CA77) ^ salt.wrapping_mul(0xC2B2_AE3D);
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    h
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| f64::from(a[i]) + (f64::from(b[i]) - f64::from(a[i])) * t)
}

/// Sky gradient over textured ground, palette chosen per scene.
pub fn procedural_backdrop(scene: SceneId, width: u32, height: u32) -> RgbImage {
    // (sky top, sky horizon, ground near, ground far, horizon fraction)
    let (top, horizon, near, far, hfrac) = match scene {
        SceneId::Pool => ([90, 150, 220], [190, 220, 245], [40, 150, 200], [120, 200, 230], 0.45),
        SceneId::Street => ([110, 140, 190], [200, 205, 215], [70, 70, 75], [140, 135, 130], 0.55),
        SceneId::Trees => ([80, 130, 200], [180, 210, 235], [30, 80, 30], [70, 120, 60], 0.50),
        SceneId::Grass => ([70, 140, 230], [170, 210, 245], [70, 140, 50], [130, 180, 90], 0.60),
        SceneId::MountainLake => ([60, 110, 190], [200, 215, 230], [40, 80, 110], [110, 120, 130], 0.50),
        SceneId::Palace => ([120, 150, 200], [230, 210, 180], [150, 90, 60], [190, 160, 120], 0.55),
        SceneId::SeasideTemple => ([50, 120, 210], [210, 225, 240], [30, 90, 160], [200, 190, 150], 0.50),
        SceneId::WinterTown => ([150, 165, 185], [220, 225, 230], [230, 235, 240], [180, 185, 195], 0.55),
    };
    let salt = scene as u32 + 1;
    let horizon_row = f64::from(height) * hfrac;
    RgbImage::from_fn(width, height, |x, y| {
        let fy = f64::from(y) + 0.5;
        let base = if fy < horizon_row {
            lerp(top, horizon, fy / horizon_row)
        } else {
            lerp(far, near, (fy - horizon_row) / (f64::from(height) - horizon_row).max(1.0))
        };
        let amp = if fy < horizon_row { 4.0 } else { 18.0 };
        let coarse = hash2(x / 8, y / 8, salt) % 1000;
        let fine = hash2(x, y, salt ^ 0xABCD) % 1000;
        let noise = amp * ((f64::from(coarse) + 0.5 * f64::from(fine)) / 1500.0 - 0.5);
        Rgb(base.map(|c| (c + noise).round().clamp(0.0, 255.0) as u8))
    })
}

/// Top-down multi-rotor silhouette on a transparent square canvas.
pub fn procedural_sprite(model: ModelId, size: u32) -> RgbaImage {
    let color = match model {
        ModelId::QuadSmall => [235, 235, 235],
        ModelId::QuadLarge => [40, 40, 45],
        ModelId::Hexacopter => [200, 60, 40],
        ModelId::Octocopter => [60, 70, 160],
    };
    let s = f64::from(size);
    let c = s / 2.0;
    let arms = model.arms();
    let arm_len = 0.36 * s;
    let rotor_r = if arms > 4 { 0.09 * s } else { 0.12 * s };
    let body_r = 0.12 * s;
    let arm_half_width = 0.035 * s;
    let tips: Vec<(f64, f64)> = (0..arms)
        .map(|k| {
            let a = std::f64::consts::TAU * (k as f64 + 0.5) / arms as f64;
            (c + arm_len * a.cos(), c + arm_len * a.sin())
        })
        .collect();
    RgbaImage::from_fn(size, size, |x, y| {
        let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let (dx, dy) = (px - c, py - c);
        if dx.hypot(dy) <= body_r {
            return Rgba([color[0], color[1], color[2], 255]);
        }
        for &(tx, ty) in &tips {
            if (px - tx).hypot(py - ty) <= rotor_r {
                return Rgba([20, 20, 20, 170]);
            }
            let (ax, ay) = (tx - c, ty - c);
            let t = ((dx * ax + dy * ay) / (ax * ax + ay * ay)).clamp(0.0, 1.0);
            if (dx - t * ax).hypot(dy - t * ay) <= arm_half_width {
                return Rgba([color[0] / 2, color[1] / 2, color[2] / 2, 255]);
            }
        }
        Rgba([0, 0, 0, 0])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelBox;
    use crate::scenario::FrameBox;

    fn frame(boxes: Vec<FrameBox>) -> AnnotatedFrame {
        AnnotatedFrame {
            id: "t".into(),
            frame_index: 0,
            camera_index: 0,
            image_width: 96,
            image_height: 80,
            scene_id: SceneId::Palace,
            seed: 0,
            boxes,
        }
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> FrameBox {
        FrameBox { bbox: PixelBox::new(x0, y0, x1, y1).unwrap(), model_id: ModelId::Octocopter }
    }

    #[test]
    fn empty_frame_is_backdrop() {
        let assets = Assets::procedural(96);
        let img = composite_image(&frame(vec![]), &assets).unwrap();
        let expect = imageops::resize(assets.backdrop(SceneId::Palace).unwrap(), 96, 80, imageops::FilterType::Nearest);
        assert_eq!(img, expect);
    }

    #[test]
    fn changes_confined_to_box() {
        let assets = Assets::procedural(96);
        let b = bx(20.3, 10.7, 51.2, 33.9);
        let base = composite_image(&frame(vec![]), &assets).unwrap();
        let img = composite_image(&frame(vec![b.clone()]), &assets).unwrap();
        let mut changed = 0;
        for (x, y, p) in img.enumerate_pixels() {
            if p != base.get_pixel(x, y) {
                changed += 1;
                let (fx, fy) = (f64::from(x), f64::from(y));
                assert!(fx + 1.0 >= b.bbox.x_min - 1.0 && fx <= b.bbox.x_max + 1.0);
                assert!(fy + 1.0 >= b.bbox.y_min - 1.0 && fy <= b.bbox.y_max + 1.0);
            }
        }
        assert!(changed > 50);
    }

    #[test]
    fn deterministic_bytes() {
        let assets = Assets::procedural(96);
        let f = frame(vec![bx(5.0, 5.0, 30.0, 20.0), bx(60.0, 40.0, 90.0, 79.0)]);
        assert_eq!(composite_image(&f, &assets).unwrap().into_raw(), composite_image(&f, &assets).unwrap().into_raw());
    }

    #[test]
    fn missing_assets_reported() {
        let err = composite_image(&frame(vec![]), &Assets::empty()).unwrap_err();
        assert!(matches!(err, ScenarioError::AssetNotFound { kind: "backdrop", .. }));
        let mut assets = Assets::empty();
        assets.insert_backdrop(SceneId::Palace, procedural_backdrop(SceneId::Palace, 10, 10));
        let err = composite_image(&frame(vec![bx(1.0, 1.0, 5.0, 5.0)]), &assets).unwrap_err();
        assert!(matches!(err, ScenarioError::AssetNotFound { kind: "sprite", .. }));
    }

    #[test]
    fn directory_round_trip() {
        let dir = std::env::temp_dir().join(format!("uavsim-assets-{}", std::process::id()));
        let assets = Assets::procedural(32);
        assets.write_dir(&dir).unwrap();
        let loaded = Assets::load_dir(&dir).unwrap();
        assert_eq!(loaded.backdrop(SceneId::Pool).unwrap(), assets.backdrop(SceneId::Pool).unwrap());
        std::fs::remove_file(Assets::sprite_path(&dir, ModelId::Hexacopter)).unwrap();
        let partial = Assets::load_dir(&dir).unwrap();
        match partial.sprite(ModelId::Hexacopter) {
            Err(ScenarioError::AssetNotFound { path, .. }) => assert!(path.ends_with("hexacopter.png")),
            other => panic!("{other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
