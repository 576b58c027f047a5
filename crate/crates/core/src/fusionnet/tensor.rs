use serde::{Deserialize, Serialize};

use super::{FusionError, Result};
use crate::Scalar;

/// Channel-major `(c, h, w)` feature tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { shape: [c, h, w], data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(FusionError::Shape(format!("dimensions must be positive, got ({c}, {h}, {w})")));
        }
        if data.len() != c * h * w {
            return Err(FusionError::Shape(format!("({c}, {h}, {w}) needs {} values, got {}", c * h * w, data.len())));
        }
        Ok(Self { shape: [c, h, w], data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| s * v)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Nearest-neighbour 2x spatial replication.
pub fn upsample2x<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let [c, h, w] = x.shape;
    let mut out = FeatureMap::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[(ch * 2 * h + y) * 2 * w + xx] = x.at(ch, y / 2, xx / 2);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_adjoint<T: Scalar>(g: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let [c, h2, w2] = g.shape;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(FusionError::Shape(format!("upsample adjoint needs even spatial size, got {:?}", g.shape)));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out.data[(ch * h + y / 2) * w + x / 2] += g.at(ch, y, x);
            }
        }
    }
    Ok(out)
}

/// Channel concatenation.
pub fn concat<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if a.shape[1..] != b.shape[1..] {
        return Err(FusionError::Shape(format!("cannot concatenate {:?} with {:?}", a.shape, b.shape)));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(FeatureMap { shape: [a.shape[0] + b.shape[0], a.shape[1], a.shape[2]], data })
}

/// Inverse of [`concat`]: the first `c` channels and the rest.
pub fn split<T: Scalar>(x: &FeatureMap<T>, c: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let [n, h, w] = x.shape;
    assert!(c > 0 && c < n, "split point {c} outside 1..{n}");
    let (a, b) = x.data.split_at(c * h * w);
    (FeatureMap { shape: [c, h, w], data: a.to_vec() }, FeatureMap { shape: [n - c, h, w], data: b.to_vec() })
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn upsample_single_cell() {
        let x = FeatureMap::from_vec(1, 1, 1, vec![3.5]).unwrap();
        assert_eq!(upsample2x(&x).data(), &[3.5; 4]);
        let ones = FeatureMap::from_vec(1, 2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(upsample2x_adjoint(&ones).unwrap().data(), &[4.0]);
    }

    #[test]
    fn upsample_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = random_map(&mut rng, 3, 4, 5);
            let y = random_map(&mut rng, 3, 8, 10);
            let lhs = upsample2x(&x).dot(&y);
            let rhs = x.dot(&upsample2x_adjoint(&y).unwrap());
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_map(&mut rng, 2, 3, 3);
        let b = random_map(&mut rng, 5, 3, 3);
        let ab = concat(&a, &b).unwrap();
        assert_eq!(ab.shape(), [7, 3, 3]);
        assert_eq!(split(&ab, 2), (a.clone(), b));
        assert!(concat(&a, &random_map(&mut rng, 1, 2, 3)).is_err());
    }

    #[test]
    fn shape_validation() {
        assert!(FeatureMap::<f64>::from_vec(0, 1, 1, vec![]).is_err());
        assert!(FeatureMap::<f64>::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for &v in &[-4.0f64, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (silu(v + h) - silu(v - h)) / (2.0 * h);
            assert!((fd - silu_grad(v)).abs() < 1e-9);
        }
    }
}
