use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Conv3d;
use crate::layers::{avg_pool3d, avg_pool3d_backward, relu, relu_backward, ChannelAffine};
use crate::param::{Init, Module, ParamVisitor};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd kernel extents; padding is `k / 2` on each axis.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Factor the kernel into a spatial `(1, kh, kw)` conv followed by a
    /// temporal `(kd, 1, 1)` conv.
    pub separable: bool,
    pub pool: [usize; 3],
    /// Standardize each channel per sample before the affine.
    #[serde(default)]
    pub instance_norm: bool,
}

/// conv → affine norm → ReLU → average pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    pub convs: Vec<Conv3d>,
    pub norm: ChannelAffine,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache {
    inputs: Vec<Tensor>,
    pre_norm: Tensor,
    act: Tensor,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(spec: ConvBlockSpec, init: Init, rng: &mut R) -> Result<Self> {
        let [kd, kh, kw] = spec.kernel;
        let [sd, sh, sw] = spec.stride;
        let convs = if spec.separable {
            vec![
                Conv3d::new(
                    spec.in_channels,
                    spec.out_channels,
                    [1, kh, kw],
                    [1, sh, sw],
                    [0, kh / 2, kw / 2],
                    init,
                    rng,
                )?,
                Conv3d::new(
                    spec.out_channels,
                    spec.out_channels,
                    [kd, 1, 1],
                    [sd, 1, 1],
                    [kd / 2, 0, 0],
                    init,
                    rng,
                )?,
            ]
        } else {
            vec![Conv3d::new(
                spec.in_channels,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                [kd / 2, kh / 2, kw / 2],
                init,
                rng,
            )?]
        };
        Ok(Self {
            spec,
            convs,
            norm: if spec.instance_norm {
                ChannelAffine::instance(spec.out_channels)
            } else {
                ChannelAffine::identity(spec.out_channels)
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ConvBlockCache)> {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            let next = conv.forward(&h)?;
            inputs.push(h);
            h = next;
        }
        let act = relu(&self.norm.forward(&h)?);
        let out = avg_pool3d(&act, self.spec.pool)?;
        Ok((
            out,
            ConvBlockCache {
                inputs,
                pre_norm: h,
                act,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, grad_out: &Tensor) -> Result<Tensor> {
        let g = avg_pool3d_backward(&cache.act, self.spec.pool, grad_out)?;
        let g = relu_backward(&cache.act, &g)?;
        let mut g = self.norm.backward(&cache.pre_norm, &g)?;
        for (conv, input) in self.convs.iter_mut().zip(&cache.inputs).rev() {
            g = conv.backward(input, &g)?;
        }
        Ok(g)
    }
}

impl Module for ConvBlock {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        for c in &mut self.convs {
            c.visit_params(v);
        }
        self.norm.visit_params(v);
    }
}

/// Basic residual block: two convs with affine norms, identity or projected
/// shortcut, ReLU after the sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub norm1: ChannelAffine,
    pub conv2: Conv3d,
    pub norm2: ChannelAffine,
    pub shortcut: Option<(Conv3d, ChannelAffine)>,
}

#[derive(Clone, Debug)]
pub struct ResidualBlockCache {
    x: Tensor,
    h1: Tensor,
    a1: Tensor,
    h2: Tensor,
    skip: Option<Tensor>,
    y: Tensor,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        let conv1 = Conv3d::new(in_channels, out_channels, kernel, stride, pad, init, rng)?;
        let conv2 = Conv3d::new(out_channels, out_channels, kernel, [1, 1, 1], pad, init, rng)?;
        let shortcut = if in_channels != out_channels || stride != [1, 1, 1] {
            Some((
                Conv3d::new(in_channels, out_channels, [1, 1, 1], stride, [0, 0, 0], init, rng)?,
                ChannelAffine::identity(out_channels),
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1: ChannelAffine::identity(out_channels),
            conv2,
            norm2: ChannelAffine::identity(out_channels),
            shortcut,
        })
    }

    /// Switches every norm in the block to instance normalization.
    pub fn with_instance_norm(mut self) -> Self {
        self.norm1.instance = true;
        self.norm2.instance = true;
        if let Some((_, n)) = &mut self.shortcut {
            n.instance = true;
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ResidualBlockCache)> {
        let h1 = self.conv1.forward(x)?;
        let a1 = relu(&self.norm1.forward(&h1)?);
        let h2 = self.conv2.forward(&a1)?;
        let mut sum = self.norm2.forward(&h2)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(x)?;
                sum.add_assign(&norm.forward(&s)?)?;
                Some(s)
            }
            None => {
                sum.add_assign(x)?;
                None
            }
        };
        let y = relu(&sum);
        Ok((
            y.clone(),
            ResidualBlockCache {
                x: x.clone(),
                h1,
                a1,
                h2,
                skip,
                y,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ResidualBlockCache, grad_out: &Tensor) -> Result<Tensor> {
        let g = relu_backward(&cache.y, grad_out)?;
        let gm = self.norm2.backward(&cache.h2, &g)?;
        let gm = self.conv2.backward(&cache.a1, &gm)?;
        let gm = relu_backward(&cache.a1, &gm)?;
        let gm = self.norm1.backward(&cache.h1, &gm)?;
        let mut gx = self.conv1.backward(&cache.x, &gm)?;
        match (&mut self.shortcut, &cache.skip) {
            (Some((conv, norm)), Some(s)) => {
                let gs = norm.backward(s, &g)?;
                gx.add_assign(&conv.backward(&cache.x, &gs)?)?;
            }
            _ => gx.add_assign(&g)?,
        }
        Ok(gx)
    }
}

impl Module for ResidualBlock {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        self.conv1.visit_params(v);
        self.norm1.visit_params(v);
        self.conv2.visit_params(v);
        self.norm2.visit_params(v);
        if let Some((c, n)) = &mut self.shortcut {
            c.visit_params(v);
            n.visit_params(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    fn check_input_grad(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, r: &Tensor, gx: &Tensor) {
        let eps = 2e-3f32;
        let mut bad = 0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (dot(&f(&xp), r) - dot(&f(&xm), r)) / (2.0 * eps as f64);
            if (fd - gx.data()[i] as f64).abs() > 1e-2 * (1.0 + fd.abs()) {
                bad += 1;
            }
        }
        // A coordinate whose perturbation crosses a ReLU kink disagrees.
        assert!(bad * 20 <= x.len(), "{bad} of {} coordinates disagree", x.len());
    }

    #[test]
    fn conv_block_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for separable in [false, true] {
            let spec = ConvBlockSpec {
                in_channels: 2,
                out_channels: 3,
                kernel: [3, 3, 3],
                stride: [1, 2, 2],
                separable,
                pool: [2, 1, 1],
                instance_norm: false,
            };
            let mut block = ConvBlock::new(spec, Init::HE, &mut rng).unwrap();
            block.norm.shift.value = vec![0.3, 0.2, 0.1];
            let x = random(&[2, 4, 4, 4], &mut rng);
            let (y, cache) = block.forward_cached(&x).unwrap();
            let r = random(y.shape(), &mut rng);
            let gx = block.backward(&cache, &r).unwrap();
            check_input_grad(|t| block.forward(t).unwrap(), &x, &r, &gx);
        }
    }

    #[test]
    fn residual_block_gradient_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut block = ResidualBlock::new(2, 4, [1, 3, 3], [1, 2, 2], Init::HE, &mut rng).unwrap();
        let x = random(&[2, 1, 6, 6], &mut rng);
        let (y, cache) = block.forward_cached(&x).unwrap();
        assert_eq!(y.shape(), &[4, 1, 3, 3]);
        let r = random(y.shape(), &mut rng);
        let gx = block.backward(&cache, &r).unwrap();
        check_input_grad(|t| block.forward(t).unwrap(), &x, &r, &gx);

        let ident = ResidualBlock::new(3, 3, [3, 3, 3], [1, 1, 1], Init::HE, &mut rng).unwrap();
        assert!(ident.shortcut.is_none());
    }

    #[test]
    fn zero_init_block_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvBlockSpec {
            in_channels: 3,
            out_channels: 4,
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            separable: false,
            pool: [2, 2, 2],
            instance_norm: false,
        };
        let block = ConvBlock::new(spec, Init::Zeros, &mut rng).unwrap();
        let x = random(&[3, 4, 4, 4], &mut rng);
        assert!(block.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
