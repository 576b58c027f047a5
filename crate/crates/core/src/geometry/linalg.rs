//! Small fixed-size vector and matrix types.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Vector3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zeros() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    /// Unit vector, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() {
            Some(self.scale(T::one() / n))
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<T: Scalar> Add for Vector3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> Sub for Vector3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Neg for Vector3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matrix3<T> {
    pub rows: [[T; 3]; 3],
}

impl<T: Scalar> Matrix3<T> {
    pub const fn from_rows(rows: [[T; 3]; 3]) -> Self {
        Self { rows }
    }

    pub fn from_columns(c0: Vector3<T>, c1: Vector3<T>, c2: Vector3<T>) -> Self {
        Self::from_rows([[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]])
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn column(&self, j: usize) -> Vector3<T> {
        Vector3::new(self.rows[0][j], self.rows[1][j], self.rows[2][j])
    }

    pub fn transpose(&self) -> Self {
        let r = &self.rows;
        Self::from_rows([
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ])
    }

    pub fn determinant(&self) -> T {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn mul_vec(&self, v: Vector3<T>) -> Vector3<T> {
        let r = &self.rows;
        Vector3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.rows[i][0] * o.rows[0][j]
                    + self.rows[i][1] * o.rows[1][j]
                    + self.rows[i][2] * o.rows[2][j];
            }
        }
        Self::from_rows(out)
    }

    /// Largest entry-wise deviation of `selfᵀ·self` from the identity.
    pub fn orthonormality_error(&self) -> T {
        let g = self.transpose().mul_mat(self);
        let id = Self::identity();
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((g.rows[i][j] - id.rows[i][j]).abs());
            }
        }
        worst
    }

    /// Gram-Schmidt on the columns, keeping the first column's direction.
    ///
    /// Returns `None` when the columns are (numerically) dependent.
    pub fn orthonormalized(&self) -> Option<Self> {
        let c0 = self.column(0).normalized()?;
        let c1 = self.column(1);
        let c1 = (c1 - c0.scale(c0.dot(c1))).normalized()?;
        let c2 = c0.cross(c1);
        Some(Self::from_columns(c0, c1, c2))
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|v| v.is_finite())
    }
}

impl<T> Index<(usize, usize)> for Matrix3<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.rows[i][j]
    }
}

impl<T: Scalar> Mul for Matrix3<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.mul_mat(&o)
    }
}

impl<T: Scalar> Mul<Vector3<T>> for Matrix3<T> {
    type Output = Vector3<T>;
    fn mul(self, v: Vector3<T>) -> Vector3<T> {
        self.mul_vec(v)
    }
}

/// Rotation from yaw-pitch-roll (Z-Y-X intrinsic, right-handed):
/// `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
pub fn rotation_from_euler<T: Scalar>(roll: T, pitch: T, yaw: T) -> Matrix3<T> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::from_rows([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])
}

/// Inverse of [`rotation_from_euler`], returning `(roll, pitch, yaw)`.
pub fn euler_from_rotation<T: Scalar>(r: &Matrix3<T>) -> (T, T, T) {
    let sp = (-r[(2, 0)]).max(-T::one()).min(T::one());
    let pitch = sp.asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    (roll, pitch, yaw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_product(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    #[test]
    fn euler_zero_is_identity() {
        assert_eq!(rotation_from_euler(0.0, 0.0, 0.0), Matrix3::<f64>::identity());
    }

    #[test]
    fn yaw_pi_negates_first_two_axes() {
        let r = rotation_from_euler(0.0, 0.0, std::f64::consts::PI);
        let expect = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.rows[i][j] - expect[i][j]).abs() < 1e-12);
            }
        }
        assert!(r.orthonormality_error() < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn euler_matches_elementary_rotation_product() {
        let (roll, pitch, yaw): (f64, f64, f64) = (0.3, -0.7, 2.1);
        let rx = [[1.0, 0.0, 0.0], [0.0, roll.cos(), -roll.sin()], [0.0, roll.sin(), roll.cos()]];
        let ry = [[pitch.cos(), 0.0, pitch.sin()], [0.0, 1.0, 0.0], [-pitch.sin(), 0.0, pitch.cos()]];
        let rz = [[yaw.cos(), -yaw.sin(), 0.0], [yaw.sin(), yaw.cos(), 0.0], [0.0, 0.0, 1.0]];
        let expect = naive_product(&naive_product(&rz, &ry), &rx);
        let r = rotation_from_euler(roll, pitch, yaw);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.rows[i][j] - expect[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn euler_round_trip() {
        let r = rotation_from_euler(0.2_f64, 0.4, -1.3);
        let (a, b, c) = euler_from_rotation(&r);
        assert!((a - 0.2).abs() < 1e-12 && (b - 0.4).abs() < 1e-12 && (c + 1.3).abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_repairs_drift() {
        let mut r = rotation_from_euler(0.1_f64, 0.2, 0.3);
        r.rows[0][1] += 1e-4;
        let fixed = r.orthonormalized().unwrap();
        assert!(fixed.orthonormality_error() < 1e-12);
        assert!((fixed.determinant() - 1.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn random_euler_is_rotation(roll in -7.0f64..7.0, pitch in -7.0f64..7.0, yaw in -7.0f64..7.0) {
            let r = rotation_from_euler(roll, pitch, yaw);
            proptest::prop_assert!(r.orthonormality_error() < 1e-9);
            proptest::prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn f32_euler_is_rotation(roll in -3.0f32..3.0, pitch in -3.0f32..3.0, yaw in -3.0f32..3.0) {
            let r = rotation_from_euler(roll, pitch, yaw);
            proptest::prop_assert!(f64::from(r.orthonormality_error()) < f32::ROTATION_TOL);
        }
    }
}
