use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::param::{Init, Module, Param, ParamVisitor};
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// 3D convolution over a `[C, D, H, W]` volume, computed as im2col + SGEMM.
///
/// A kernel depth of 1 turns it into a 2D convolution over `[C, 1, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Visits every (column-matrix offset, input offset) pair that lies inside
    /// the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.padding;
        let n = self.cols();
        let mut row = 0;
        for ci in 0..self.c {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let base = row * n;
                        for z in 0..od {
                            let iz = (z * sd + a) as isize - pd as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * sh + b) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = ((ci * d + iz as usize) * h + iy as usize) * w;
                                let out_row = base + (z * oh + y) * ow;
                                for x in 0..ow {
                                    let ix = (x * sw + e) as isize - pw as isize;
                                    if ix >= 0 && ix < w as isize {
                                        f(out_row + x, in_row + ix as usize);
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let mut col = vec![0.0f32; self.rows() * self.cols()];
        self.for_each_tap(|ci, xi| col[ci] = x[xi]);
        col
    }

    fn col2im(&self, col: &[f32]) -> Vec<f32> {
        let mut x = vec![0.0f32; self.c * self.input.iter().product::<usize>()];
        self.for_each_tap(|ci, xi| x[xi] += col[ci]);
        x
    }
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(NnError::Config("conv channels must be positive".into()));
        }
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(NnError::Config("conv kernel and stride must be positive".into()));
        }
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = Param::new(init.sample(out_channels * fan_in, fan_in, rng));
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: Param::zeros(out_channels),
        })
    }

    /// Convenience constructor for a "same"-padded kernel of odd size `k`
    /// along every axis with kernel depth > 1.
    pub fn cube<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: [usize; 3],
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(in_channels, out_channels, [k; 3], stride, [k / 2; 3], init, rng)
    }

    /// 2D convolution (kernel depth 1) with "same" padding for odd `k`.
    pub fn planar<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            [1, k, k],
            [1, stride, stride],
            [0, k / 2, k / 2],
            init,
            rng,
        )
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.padding[i];
            if padded < self.kernel[i] {
                return Err(NnError::Config(format!(
                    "input extent {} (padded {}) smaller than kernel {} on axis {}",
                    input[i], padded, self.kernel[i], i
                )));
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let [c, d, h, w] = x.dims4()?;
        if c != self.in_channels {
            return Err(NnError::Shape {
                expected: vec![self.in_channels, d, h, w],
                actual: x.shape().to_vec(),
            });
        }
        Ok(Geometry {
            c,
            input: [d, h, w],
            output: self.output_dims([d, h, w])?,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let (r, n, m) = (g.rows(), g.cols(), self.out_channels);
        let col = g.im2col(x.data());
        let mut out = vec![0.0f32; m * n];
        // SAFETY: all pointers reference live buffers whose sizes match the
        // (m, k, n) extents and row/column strides passed alongside them.
        unsafe {
            matrixmultiply::sgemm(
                m,
                r,
                n,
                1.0,
                self.weight.value.as_ptr(),
                r as isize,
                1,
                col.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for (oc, chunk) in out.chunks_mut(n).enumerate() {
            let b = self.bias.value[oc];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let [od, oh, ow] = g.output;
        Tensor::new(vec![m, od, oh, ow], out)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let (r, n, m) = (g.rows(), g.cols(), self.out_channels);
        let [od, oh, ow] = g.output;
        grad_out.check_shape(&[m, od, oh, ow])?;
        let gy = grad_out.data();
        let col = g.im2col(x.data());
        let mut grad_col = vec![0.0f32; r * n];
        // SAFETY: as in `forward`; transposed operands are expressed through
        // swapped strides over the same row-major buffers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                n,
                r,
                1.0,
                gy.as_ptr(),
                n as isize,
                1,
                col.as_ptr(),
                1,
                n as isize,
                1.0,
                self.weight.grad.as_mut_ptr(),
                r as isize,
                1,
            );
            matrixmultiply::sgemm(
                r,
                m,
                n,
                1.0,
                self.weight.value.as_ptr(),
                1,
                r as isize,
                gy.as_ptr(),
                n as isize,
                1,
                0.0,
                grad_col.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for (oc, chunk) in gy.chunks(n).enumerate() {
            self.bias.grad[oc] += chunk.iter().sum::<f32>();
        }
        let [d, h, w] = g.input;
        Tensor::new(vec![g.c, d, h, w], g.col2im(&grad_col))
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        v.visit_f32(&mut self.weight);
        v.visit_f32(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an independent reference.
    fn naive(conv: &Conv3d, x: &Tensor) -> Tensor {
        let [c, d, h, w] = x.dims4().unwrap();
        let [od, oh, ow] = conv.output_dims([d, h, w]).unwrap();
        let [kd, kh, kw] = conv.kernel;
        let mut out = Tensor::zeros(&[conv.out_channels, od, oh, ow]);
        for oc in 0..conv.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = conv.bias.value[oc] as f64;
                        for ci in 0..c {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * conv.stride[0] + a) as isize - conv.padding[0] as isize;
                                        let iy = (y * conv.stride[1] + b) as isize - conv.padding[1] as isize;
                                        let ix = (xx * conv.stride[2] + e) as isize - conv.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let wi = (((oc * c + ci) * kd + a) * kh + b) * kw + e;
                                        let xi = ((ci * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        acc += conv.weight.value[wi] as f64 * x.data()[xi] as f64;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((oc * od + z) * oh + y) * ow + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [([3, 3, 3], [1, 1, 1], [1, 1, 1]), ([3, 1, 2], [2, 1, 2], [0, 1, 1]), ([1, 3, 3], [1, 2, 2], [0, 1, 1])] {
            let mut conv = Conv3d::new(2, 3, k, s, p, Init::HE, &mut rng).unwrap();
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let x = random(&[2, 5, 6, 7], &mut rng);
            let fast = conv.forward(&x).unwrap();
            let slow = naive(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv3d::new(2, 2, [3, 3, 2], [1, 2, 1], [1, 1, 0], Init::HE, &mut rng).unwrap();
        let x = random(&[2, 4, 5, 4], &mut rng);
        let y = conv.forward(&x).unwrap();
        let r = random(y.shape(), &mut rng);
        let gx = conv.backward(&x, &r).unwrap();
        let eps = 1e-2f32;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (dot(&conv.forward(&xp).unwrap(), &r) - dot(&conv.forward(&xm).unwrap(), &r)) / (2.0 * eps as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 2e-3 * (1.0 + fd.abs()), "x[{i}]: {fd} vs {}", gx.data()[i]);
        }
        let analytic = conv.weight.grad.clone();
        for i in (0..analytic.len()).step_by(3) {
            let mut c = conv.clone();
            c.weight.value[i] += eps;
            let up = dot(&c.forward(&x).unwrap(), &r);
            c.weight.value[i] -= 2.0 * eps;
            let down = dot(&c.forward(&x).unwrap(), &r);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - analytic[i] as f64).abs() < 2e-3 * (1.0 + fd.abs()), "w[{i}]: {fd} vs {}", analytic[i]);
        }
        let bias_fd: f64 = r.data().chunks(r.len() / 2).next().unwrap().iter().map(|&v| v as f64).sum();
        assert!((bias_fd - conv.bias.grad[0] as f64).abs() < 1e-4);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv3d::cube(3, 4, 3, [1, 1, 1], Init::HE, &mut rng).unwrap();
        assert!(conv.forward(&Tensor::zeros(&[2, 4, 4, 4])).is_err());
    }
}
