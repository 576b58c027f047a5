use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, FusionError, Result};
use crate::Scalar;

/// Square-kernel cross-correlation with padding `k / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(out_ch, in_ch, k, k)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kernel % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(FusionError::Shape(format!(
                "invalid conv: {in_ch}->{out_ch}, kernel {kernel}, stride {stride}"
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kernel,
            stride,
            weight: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: vec![T::zero(); out_ch],
        })
    }

    /// He-style normal initialisation, small random biases.
    pub fn random(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut c = Self::zeros(in_ch, out_ch, kernel, stride)?;
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        for w in &mut c.weight {
            *w = T::lit(std * rng.sample::<f64, _>(StandardNormal));
        }
        for b in &mut c.bias {
            *b = T::lit(0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        Ok(c)
    }

    /// 1x1 identity map over `ch` channels.
    pub fn identity(ch: usize) -> Self {
        let mut c = Self::zeros(ch, ch, 1, 1).expect("valid shape");
        for i in 0..ch {
            c.weight[i * ch + i] = T::one();
        }
        c
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        if c != self.in_ch {
            return Err(FusionError::Shape(format!(
                "conv expects {} input channels ({}x{}x{}x{} kernel), got input {:?}",
                self.in_ch, self.out_ch, self.in_ch, self.kernel, self.kernel, input
            )));
        }
        let p = self.padding();
        let dim = |n: usize| (n + 2 * p - self.kernel) / self.stride + 1;
        Ok([self.out_ch, dim(h), dim(w)])
    }

    /// Patch matrix with one row per `(in_ch, ky, kx)` tap and one column
    /// per output position; padded taps are zero.
    fn im2col(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
        let [ci, h, w] = x.shape();
        let (k, s, p) = (self.kernel, self.stride, self.padding());
        let n = oh * ow;
        let xs = x.data();
        let mut cols = vec![T::zero(); ci * k * k * n];
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((i * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                        let src = &xs[(i * h + iy) * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < w) {
                                *d = src[ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let [_, oh, ow] = self.output_shape(x.shape())?;
        let n = oh * ow;
        let taps = self.in_ch * self.kernel * self.kernel;
        let cols = self.im2col(x, oh, ow);
        let mut out = vec![T::zero(); self.out_ch * n];
        // Each output sums bias, then taps in (channel, ky, kx) order.
        for o in 0..self.out_ch {
            let plane = &mut out[o * n..][..n];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            let wrow = &self.weight[o * taps..][..taps];
            for (t, &wv) in wrow.iter().enumerate() {
                let src = &cols[t * n..][..n];
                for (d, &c) in plane.iter_mut().zip(src) {
                    *d += wv * c;
                }
            }
        }
        FeatureMap::from_vec(self.out_ch, oh, ow, out)
    }

    /// Adjoints of [`forward`](Self::forward) with respect to the input and
    /// the parameters.
    pub fn backward(&self, x: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> Result<(FeatureMap<T>, ConvGrad<T>)> {
        let expected = self.output_shape(x.shape())?;
        if grad_out.shape() != expected {
            return Err(FusionError::Shape(format!(
                "gradient shape {:?} does not match conv output {expected:?} for input {:?}",
                grad_out.shape(),
                x.shape()
            )));
        }
        let [ci, h, w] = x.shape();
        let [_, oh, ow] = expected;
        let (k, s, p) = (self.kernel, self.stride, self.padding());
        let n = oh * ow;
        let taps = ci * k * k;
        let cols = self.im2col(x, oh, ow);
        let gs = grad_out.data();
        let mut gw = vec![T::zero(); self.weight.len()];
        let mut gb = vec![T::zero(); self.out_ch];
        let mut gcols = vec![T::zero(); taps * n];
        for o in 0..self.out_ch {
            let g = &gs[o * n..][..n];
            gb[o] = g.iter().copied().sum();
            for t in 0..taps {
                let c = &cols[t * n..][..n];
                gw[o * taps + t] = dot4(g, c);
                let wv = self.weight[o * taps + t];
                for (d, &gv) in gcols[t * n..][..n].iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
        // Scatter the patch gradient back onto the input (col2im).
        let mut gx = FeatureMap::zeros(ci, h, w);
        let gxs = gx.data_mut();
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &gcols[((i * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < h) else { continue };
                        let dst = &mut gxs[(i * h + iy) * w..][..w];
                        for ox in 0..ow {
                            if let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < w) {
                                dst[ix] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        Ok((gx, ConvGrad { weight: gw, bias: gb }))
    }
}

/// Dot product with four interleaved partial sums.
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct per-output loop with explicit bounds checks.
    fn naive_forward(c: &ConvLayer<f64>, x: &FeatureMap<f64>) -> Vec<f64> {
        let [ci, h, w] = x.shape();
        let [_, oh, ow] = c.output_shape(x.shape()).unwrap();
        let (k, s, p) = (c.kernel as isize, c.stride as isize, c.padding() as isize);
        let mut out = Vec::new();
        for o in 0..c.out_ch {
            for oy in 0..oh as isize {
                for ox in 0..ow as isize {
                    let mut acc = c.bias[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (oy * s + ky - p, ox * s + kx - p);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let wi = ((o * ci + i) * c.kernel + ky as usize) * c.kernel + kx as usize;
                                    acc += c.weight[wi] * x.at(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w) in [(1, 1), (2, 3), (5, 5), (8, 7)] {
            for stride in [1, 2] {
                for kernel in [1, 3] {
                    let c = ConvLayer::<f64>::random(2, 3, kernel, stride, &mut rng).unwrap();
                    let x = random_map(&mut rng, 2, h, w);
                    assert_eq!(c.forward(&x).unwrap().data(), &naive_forward(&c, &x)[..]);
                }
            }
        }
    }

    #[test]
    fn identity_kernel_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(&mut rng, 4, 5, 5);
        assert_eq!(ConvLayer::identity(4).forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = ConvLayer::<f64>::random(2, 3, 3, 2, &mut rng).unwrap();
        let y = c.forward(&FeatureMap::zeros(2, 6, 6)).unwrap();
        assert_eq!(y.shape(), [3, 3, 3]);
        for o in 0..3 {
            assert!(y.data()[o * 9..(o + 1) * 9].iter().all(|&v| v == c.bias[o]));
        }
    }

    #[test]
    fn shape_laws() {
        let c = ConvLayer::<f64>::zeros(3, 4, 3, 2).unwrap();
        assert_eq!(c.output_shape([3, 64, 64]).unwrap(), [4, 32, 32]);
        assert_eq!(c.output_shape([3, 2, 2]).unwrap(), [4, 1, 1]);
        assert_eq!(ConvLayer::<f64>::zeros(3, 4, 3, 1).unwrap().output_shape([3, 7, 5]).unwrap(), [4, 7, 5]);
        let err = c.forward(&FeatureMap::zeros(2, 4, 4)).unwrap_err().to_string();
        assert!(err.contains("[2, 4, 4]"), "{err}");
        assert!(ConvLayer::<f64>::zeros(3, 4, 2, 1).is_err());
        assert!(ConvLayer::<f64>::zeros(3, 4, 3, 3).is_err());
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for stride in [1, 2] {
            for kernel in [1, 3] {
                let c = ConvLayer::<f64>::random(3, 2, kernel, stride, &mut rng).unwrap();
                let x = random_map(&mut rng, 3, 6, 5);
                let [o, oh, ow] = c.output_shape(x.shape()).unwrap();
                let y = random_map(&mut rng, o, oh, ow);
                let (gx, _) = c.backward(&x, &y).unwrap();
                // The bias-free part of the conv is linear in x.
                let mut nb = c.clone();
                nb.bias.iter_mut().for_each(|b| *b = 0.0);
                let lhs = nb.forward(&x).unwrap().dot(&y);
                assert!((lhs - x.dot(&gx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = ConvLayer::<f64>::random(2, 3, 3, 2, &mut rng).unwrap();
        let x = random_map(&mut rng, 2, 5, 5);
        let [o, oh, ow] = c.output_shape(x.shape()).unwrap();
        let y = random_map(&mut rng, o, oh, ow);
        // Objective: sum of squares weighted by y, which is nonlinear in the weights.
        let f = |c: &ConvLayer<f64>, x: &FeatureMap<f64>| {
            let out = c.forward(x).unwrap();
            out.data().iter().zip(y.data()).map(|(a, b)| 0.5 * a * a * b).sum::<f64>()
        };
        let out = c.forward(&x).unwrap();
        let g = out.zip_map(&y, |a, b| a * b);
        let (gx, gp) = c.backward(&x, &g).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..c.weight.len() {
            let (mut p, mut m) = (c.clone(), c.clone());
            p.weight[i] += eps;
            m.weight[i] -= eps;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
            assert!(rel(gp.weight[i], fd) < 1e-6, "weight {i}: {} vs {fd}", gp.weight[i]);
        }
        for i in 0..c.bias.len() {
            let (mut p, mut m) = (c.clone(), c.clone());
            p.bias[i] += eps;
            m.bias[i] -= eps;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
            assert!(rel(gp.bias[i], fd) < 1e-6);
        }
        for i in 0..x.data().len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (f(&c, &p) - f(&c, &m)) / (2.0 * eps);
            assert!(rel(gx.data()[i], fd) < 1e-6);
        }
    }
}
