use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::param::{Init, Module, Param, ParamVisitor};
use crate::tensor::Tensor;
use crate::{NnError, Result};

const NORM_EPS: f32 = 1e-5;

/// Per-channel learned scale and shift over a `[C, ...]` volume.
///
/// With `instance` set, each channel is first standardized with its own mean
/// and variance over the sample (instance normalization). Neither mode keeps
/// batch state, so training and inference compute the same function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine {
    pub scale: Param,
    pub shift: Param,
    #[serde(default)]
    pub instance: bool,
}

fn moments(v: &[f32]) -> (f32, f32) {
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    (mean, (var + NORM_EPS).sqrt())
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Param::new(vec![1.0; channels]),
            shift: Param::zeros(channels),
            instance: false,
        }
    }

    pub fn instance(channels: usize) -> Self {
        Self {
            instance: true,
            ..Self::identity(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let c = self.channels();
        if x.shape().first() != Some(&c) {
            return Err(NnError::Shape {
                expected: vec![c],
                actual: x.shape().to_vec(),
            });
        }
        Ok(x.len() / c)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let per = self.check(x)?;
        let mut y = x.clone();
        for (c, chunk) in y.data_mut().chunks_mut(per).enumerate() {
            let (s, b) = (self.scale.value[c], self.shift.value[c]);
            if self.instance {
                let (mean, std) = moments(chunk);
                chunk.iter_mut().for_each(|v| *v = (*v - mean) / std * s + b);
            } else {
                chunk.iter_mut().for_each(|v| *v = *v * s + b);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let per = self.check(x)?;
        grad_out.check_shape(x.shape())?;
        let mut gx = grad_out.clone();
        for (c, (gchunk, xchunk)) in gx.data_mut().chunks_mut(per).zip(x.data().chunks(per)).enumerate() {
            let s = self.scale.value[c];
            let mut gs = 0.0f32;
            let mut gb = 0.0f32;
            if self.instance {
                let (mean, std) = moments(xchunk);
                let n = per as f32;
                let mut sum_g = 0.0f32;
                let mut sum_gx = 0.0f32;
                for (g, xv) in gchunk.iter().zip(xchunk) {
                    let xh = (xv - mean) / std;
                    gs += g * xh;
                    gb += g;
                    sum_g += g * s;
                    sum_gx += g * s * xh;
                }
                for (g, xv) in gchunk.iter_mut().zip(xchunk) {
                    let xh = (xv - mean) / std;
                    *g = (*g * s - sum_g / n - xh * sum_gx / n) / std;
                }
                self.scale.grad[c] += gs;
                self.shift.grad[c] += gb;
                continue;
            }
            for (g, xv) in gchunk.iter_mut().zip(xchunk) {
                gs += *g * *xv;
                gb += *g;
                *g *= s;
            }
            self.scale.grad[c] += gs;
            self.shift.grad[c] += gb;
        }
        Ok(gx)
    }
}

impl Module for ChannelAffine {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        v.visit_f32(&mut self.scale);
        v.visit_f32(&mut self.shift);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.check_shape(y.shape())?;
    let mut g = grad_out.clone();
    for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
        if *yv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

fn pooled_dims(x: &Tensor, k: [usize; 3]) -> Result<([usize; 4], [usize; 3])> {
    let dims = x.dims4()?;
    let [_, d, h, w] = dims;
    if k.contains(&0) || d < k[0] || h < k[1] || w < k[2] {
        return Err(NnError::Config(format!(
            "pool window {k:?} does not fit input {:?}",
            x.shape()
        )));
    }
    Ok((dims, [d / k[0], h / k[1], w / k[2]]))
}

/// Non-overlapping average pooling (window = stride). Trailing elements that
/// do not fill a whole window are dropped.
pub fn avg_pool3d(x: &Tensor, k: [usize; 3]) -> Result<Tensor> {
    let ([c, _, h, w], [od, oh, ow]) = pooled_dims(x, k)?;
    let d = x.dims4()?[1];
    let inv = 1.0 / (k[0] * k[1] * k[2]) as f32;
    let mut out = Tensor::zeros(&[c, od, oh, ow]);
    let xs = x.data();
    let o = out.data_mut();
    for ci in 0..c {
        for z in 0..od * k[0] {
            for y in 0..oh * k[1] {
                let src = ((ci * d + z) * h + y) * w;
                let dst = ((ci * od + z / k[0]) * oh + y / k[1]) * ow;
                for xx in 0..ow * k[2] {
                    o[dst + xx / k[2]] += xs[src + xx] * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool3d_backward(x: &Tensor, k: [usize; 3], grad_out: &Tensor) -> Result<Tensor> {
    let ([c, d, h, w], [od, oh, ow]) = pooled_dims(x, k)?;
    grad_out.check_shape(&[c, od, oh, ow])?;
    let inv = 1.0 / (k[0] * k[1] * k[2]) as f32;
    let mut gx = Tensor::zeros(x.shape());
    let g = grad_out.data();
    let gxs = gx.data_mut();
    for ci in 0..c {
        for z in 0..od * k[0] {
            for y in 0..oh * k[1] {
                let dst = ((ci * d + z) * h + y) * w;
                let src = ((ci * od + z / k[0]) * oh + y / k[1]) * ow;
                for xx in 0..ow * k[2] {
                    gxs[dst + xx] = g[src + xx / k[2]] * inv;
                }
            }
        }
    }
    Ok(gx)
}

/// Mean over every axis but the first.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let c = x.shape().first().copied().unwrap_or(0);
    if c == 0 {
        return Vec::new();
    }
    let per = x.len() / c;
    x.data()
        .chunks(per)
        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32 / per as f32)
        .collect()
}

pub fn global_avg_pool_backward(shape: &[usize], grad_out: &[f32]) -> Result<Tensor> {
    let c = shape.first().copied().unwrap_or(0);
    if grad_out.len() != c {
        return Err(NnError::Shape {
            expected: vec![c],
            actual: vec![grad_out.len()],
        });
    }
    let per: usize = shape[1..].iter().product();
    let data = grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / per as f32, per))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Fully connected layer `y = W x + b` with `W` stored row-major `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, init: Init, rng: &mut R) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(NnError::Config("linear layer sizes must be positive".into()));
        }
        Ok(Self {
            in_features,
            out_features,
            weight: Param::new(init.sample(in_features * out_features, in_features, rng)),
            bias: Param::zeros(out_features),
        })
    }

    fn check(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.in_features {
            return Err(NnError::Shape {
                expected: vec![self.in_features],
                actual: vec![x.len()],
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check(x)?;
        Ok(self
            .weight
            .value
            .chunks(self.in_features)
            .zip(&self.bias.value)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + b)
            .collect())
    }

    pub fn backward(&mut self, x: &[f32], grad_out: &[f32]) -> Result<Vec<f32>> {
        self.check(x)?;
        if grad_out.len() != self.out_features {
            return Err(NnError::Shape {
                expected: vec![self.out_features],
                actual: vec![grad_out.len()],
            });
        }
        let mut gx = vec![0.0f32; self.in_features];
        for (o, &g) in grad_out.iter().enumerate() {
            self.bias.grad[o] += g;
            let row = o * self.in_features;
            for i in 0..self.in_features {
                self.weight.grad[row + i] += g * x[i];
                gx[i] += g * self.weight.value[row + i];
            }
        }
        Ok(gx)
    }
}

impl Module for Linear {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        v.visit_f32(&mut self.weight);
        v.visit_f32(&mut self.bias);
    }
}
