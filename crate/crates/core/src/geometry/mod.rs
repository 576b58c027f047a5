//! Rigid frames, pinhole projection and cuboid-to-pixel-box annotation.
//!
//! World points are mapped into the camera frame with `p_c = R·p_w + t`
//! and then onto the image plane with
//!
//! ```text
//! x_p = y_m − f·y_c / z_c
//! y_p = x_m + f·x_c / z_c
//! ```
//!
//! The swapped axes pin down the camera frame: `z_c` looks forward, `x_c`
//! points toward increasing image rows (down) and `y_c` points toward
//! decreasing image columns (left). That frame is right-handed.
//! Because the column coordinate is centred on `y_m` and the row coordinate
//! on `x_m`, non-square images need a centre chosen with that in mind; the
//! default cameras are square.

mod linalg;

pub use linalg::{euler_from_rotation, rotation_from_euler, Matrix3, Vector3};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

/// Minimum camera-frame depth (metres) for a point to count as visible.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid rotation matrix: |RᵀR − I|max = {ortho_error:e}, det = {determinant}")]
    InvalidRotation { ortho_error: f64, determinant: f64 },
    #[error("point is not in front of the camera (z_c = {depth})")]
    NotVisible { depth: f64 },
    #[error("invalid camera: {}", .0.join("; "))]
    InvalidCamera(Vec<String>),
    #[error("invalid target extent: half-sizes must be positive, got {0:?}")]
    InvalidExtent([f64; 3]),
    #[error("invalid pixel box: ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Validates the two rotation invariants at the scalar type's tolerance.
pub fn check_rotation<T: Scalar>(r: &Matrix3<T>) -> Result<()> {
    let ortho_error = r.orthonormality_error().as_f64();
    let determinant = r.determinant().as_f64();
    let tol = T::ROTATION_TOL;
    if !r.is_finite() || !(ortho_error <= tol) || !((determinant - 1.0).abs() <= tol) {
        return Err(GeometryError::InvalidRotation { ortho_error, determinant });
    }
    Ok(())
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform<T> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Scalar> RigidTransform<T> {
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<T> {
        self.translation
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)
    }

    pub fn apply(&self, p: Vector3<T>) -> Vector3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.mul_vec(self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint<T>(pub Vector3<T>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoint<T>(pub Vector3<T>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint<T> {
    pub x: T,
    pub y: T,
}

/// Pinhole camera: intrinsics plus the world→camera extrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<T> {
    focal_length: T,
    image_width: u32,
    image_height: u32,
    center: (T, T),
    extrinsics: RigidTransform<T>,
}

impl<T: Scalar> CameraModel<T> {
    pub fn new(
        focal_length: T,
        image_width: u32,
        image_height: u32,
        center: (T, T),
        extrinsics: RigidTransform<T>,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if !(focal_length > T::zero()) || !focal_length.is_finite() {
            problems.push(format!("focal length must be positive, got {focal_length}"));
        }
        if image_width == 0 || image_height == 0 {
            problems.push(format!("image size must be positive, got {image_width}x{image_height}"));
        }
        let (cx, cy) = center;
        let w = T::from_u32(image_width).unwrap_or_else(T::zero);
        let h = T::from_u32(image_height).unwrap_or_else(T::zero);
        if !(cx >= T::zero() && cx <= w && cy >= T::zero() && cy <= h) {
            problems.push(format!("center ({cx}, {cy}) outside {image_width}x{image_height} image"));
        }
        if let Err(e) = extrinsics.validate() {
            problems.push(e.to_string());
        }
        if !problems.is_empty() {
            return Err(GeometryError::InvalidCamera(problems));
        }
        Ok(Self { focal_length, image_width, image_height, center, extrinsics })
    }

    /// Camera with the principal point at the image centre and
    /// `f = width / (2·tan(hfov/2))`.
    pub fn from_hfov(
        image_width: u32,
        image_height: u32,
        hfov: T,
        extrinsics: RigidTransform<T>,
    ) -> Result<Self> {
        let w = T::from_u32(image_width).unwrap_or_else(T::zero);
        let h = T::from_u32(image_height).unwrap_or_else(T::zero);
        let two = T::lit(2.0);
        let f = w / (two * (hfov / two).tan());
        Self::new(f, image_width, image_height, (w / two, h / two), extrinsics)
    }

    pub fn focal_length(&self) -> T {
        self.focal_length
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.image_width, self.image_height)
    }

    pub fn center(&self) -> (T, T) {
        self.center
    }

    pub fn extrinsics(&self) -> &RigidTransform<T> {
        &self.extrinsics
    }

    pub fn with_extrinsics(&self, extrinsics: RigidTransform<T>) -> Result<Self> {
        extrinsics.validate()?;
        Ok(Self { extrinsics, ..*self })
    }
}

/// Half-sizes of a target's body-frame bounding cuboid, in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetExtent<T> {
    pub hx: T,
    pub hy: T,
    pub hz: T,
}

impl<T: Scalar> TargetExtent<T> {
    pub fn new(hx: T, hy: T, hz: T) -> Result<Self> {
        if hx > T::zero() && hy > T::zero() && hz > T::zero() {
            Ok(Self { hx, hy, hz })
        } else {
            Err(GeometryError::InvalidExtent([hx.as_f64(), hy.as_f64(), hz.as_f64()]))
        }
    }

    pub fn corners(&self) -> [Vector3<T>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -self.hx } else { self.hx };
            let sy = if i & 2 == 0 { -self.hy } else { self.hy };
            let sz = if i & 4 == 0 { -self.hz } else { self.hz };
            *c = Vector3::new(sx, sy, sz);
        }
        out
    }

    /// Length of the cuboid's space diagonal.
    pub fn diagonal(&self) -> T {
        T::lit(2.0) * Vector3::new(self.hx, self.hy, self.hz).norm()
    }
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
    #[serde(default)]
    pub clamped: bool,
}

impl<T: Scalar> PixelBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            && x_min <= x_max
            && y_min <= y_max;
        if !ok {
            return Err(GeometryError::InvalidBox {
                x_min: x_min.as_f64(),
                y_min: y_min.as_f64(),
                x_max: x_max.as_f64(),
                y_max: y_max.as_f64(),
            });
        }
        Ok(Self { x_min, y_min, x_max, y_max, clamped: false })
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::lit(2.0);
        ((self.x_min + self.x_max) / two, (self.y_min + self.y_max) / two)
    }

    pub fn contains(&self, x: T, y: T) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Clips to `[0,width]×[0,height]`; `None` when nothing remains.
    pub fn clip(&self, width: T, height: T) -> Option<Self> {
        let z = T::zero();
        if self.x_max <= z || self.y_max <= z || self.x_min >= width || self.y_min >= height {
            return None;
        }
        let x_min = self.x_min.max(z);
        let y_min = self.y_min.max(z);
        let x_max = self.x_max.min(width);
        let y_max = self.y_max.min(height);
        let clamped = self.clamped
            || x_min != self.x_min
            || y_min != self.y_min
            || x_max != self.x_max
            || y_max != self.y_max;
        let out = Self { x_min, y_min, x_max, y_max, clamped };
        (out.area() > z).then_some(out)
    }

    pub fn cast<U: Scalar>(&self) -> PixelBox<U> {
        PixelBox {
            x_min: U::lit(self.x_min.as_f64()),
            y_min: U::lit(self.y_min.as_f64()),
            x_max: U::lit(self.x_max.as_f64()),
            y_max: U::lit(self.y_max.as_f64()),
            clamped: self.clamped,
        }
    }
}

/// `p_c = R·p_w + t`.
pub fn world_to_camera<T: Scalar>(p: WorldPoint<T>, x: &RigidTransform<T>) -> Result<CameraPoint<T>> {
    x.validate()?;
    Ok(CameraPoint(x.apply(p.0)))
}

fn project_unchecked<T: Scalar>(p: Vector3<T>, cam: &CameraModel<T>) -> PixelPoint<T> {
    let (x_m, y_m) = cam.center;
    let f = cam.focal_length;
    PixelPoint { x: y_m - f * (p.y / p.z), y: x_m + f * (p.x / p.z) }
}

/// Pinhole projection of a camera-frame point.
pub fn project_to_pixel<T: Scalar>(p: CameraPoint<T>, cam: &CameraModel<T>) -> Result<PixelPoint<T>> {
    if !(p.0.z > T::lit(DEPTH_EPSILON)) {
        return Err(GeometryError::NotVisible { depth: p.0.z.as_f64() });
    }
    Ok(project_unchecked(p.0, cam))
}

/// Projects the 8 corners of a target cuboid and returns their clipped
/// pixel-space hull.
///
/// `target_pose` maps body coordinates to world coordinates. Targets with
/// any corner at or behind the camera plane are dropped, as are hulls that
/// miss the image.
pub fn project_bbox<T: Scalar>(
    target_pose: &RigidTransform<T>,
    extent: &TargetExtent<T>,
    cam: &CameraModel<T>,
) -> Result<Option<PixelBox<T>>> {
    target_pose.validate()?;
    let world_to_cam = cam.extrinsics.compose(target_pose);
    let eps = T::lit(DEPTH_EPSILON);
    let mut hull: Option<(T, T, T, T)> = None;
    for corner in extent.corners() {
        let pc = world_to_cam.apply(corner);
        if !(pc.z > eps) {
            return Ok(None);
        }
        let px = project_unchecked(pc, cam);
        hull = Some(match hull {
            None => (px.x, px.y, px.x, px.y),
            Some((a, b, c, d)) => (a.min(px.x), b.min(px.y), c.max(px.x), d.max(px.y)),
        });
    }
    let Some((x_min, y_min, x_max, y_max)) = hull else {
        return Ok(None);
    };
    let (w, h) = cam.image_size();
    let raw = PixelBox { x_min, y_min, x_max, y_max, clamped: false };
    Ok(raw.clip(T::from_u32(w).unwrap(), T::from_u32(h).unwrap()))
}
