//! Machinery shared by the two counting streams: a layer stack with a
//! mid-level tap, global average pooling, and the counting head.

use repcount_nn::{
    global_avg_pool, global_avg_pool_backward, ConvBlock, ConvBlockCache, Module, ParamVisitor, ResidualBlock,
    ResidualBlockCache, Sgd, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::head::{counting_loss_grad, CountingHead, HeadOutput, LossBreakdown};
use crate::metrics::{CountPrediction, Modality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvBlock),
    Residual(ResidualBlock),
}

enum LayerCache {
    Conv(ConvBlockCache),
    Residual(ResidualBlockCache),
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Layer::Conv(b) => b.forward(x)?,
            Layer::Residual(b) => b.forward(x)?,
        })
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Conv(b) => {
                let (y, c) = b.forward_cached(x)?;
                (y, LayerCache::Conv(c))
            }
            Layer::Residual(b) => {
                let (y, c) = b.forward_cached(x)?;
                (y, LayerCache::Residual(c))
            }
        })
    }

    fn backward(&mut self, cache: &LayerCache, g: &Tensor) -> Result<Tensor> {
        Ok(match (self, cache) {
            (Layer::Conv(b), LayerCache::Conv(c)) => b.backward(c, g)?,
            (Layer::Residual(b), LayerCache::Residual(c)) => b.backward(c, g)?,
            _ => unreachable!("cache produced by a different layer kind"),
        })
    }

    fn visit(&mut self, v: &mut dyn ParamVisitor) {
        match self {
            Layer::Conv(b) => b.visit_params(v),
            Layer::Residual(b) => b.visit_params(v),
        }
    }
}

/// Layer stack followed by global average pooling. The output of layer
/// `tap` is exported as the mid-level feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub layers: Vec<Layer>,
    pub tap: usize,
    pub input_shape: Vec<usize>,
}

pub struct BackboneCache {
    layers: Vec<LayerCache>,
    final_shape: Vec<usize>,
}

impl Backbone {
    pub fn new(layers: Vec<Layer>, tap: usize, input_shape: Vec<usize>) -> Result<Self> {
        if tap >= layers.len() {
            return Err(argument("tap index beyond the last layer"));
        }
        Ok(Self {
            layers,
            tap,
            input_shape,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(argument(format!(
                "input shape {:?} does not match expected {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Final feature vector and tap activation.
    pub fn forward(&self, x: &Tensor) -> Result<(Vec<f32>, Tensor)> {
        self.check(x)?;
        let mut h = x.clone();
        let mut tap = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i == self.tap {
                tap = Some(h.clone());
            }
        }
        Ok((global_avg_pool(&h), tap.expect("tap index validated")))
    }

    /// Runs only up to the tap.
    pub fn tap(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = x.clone();
        for layer in &self.layers[..=self.tap] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Vec<f32>, BackboneCache)> {
        self.check(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((
            global_avg_pool(&h),
            BackboneCache {
                layers: caches,
                final_shape: h.shape().to_vec(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &BackboneCache, grad_feature: &[f32]) -> Result<()> {
        let mut g = global_avg_pool_backward(&cache.final_shape, grad_feature)?;
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = layer.backward(c, &g)?;
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Conv(b)) => b.spec.out_channels,
            Some(Layer::Residual(b)) => b.out_channels(),
            None => 0,
        }
    }
}

impl Module for Backbone {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        for l in &mut self.layers {
            l.visit(v);
        }
    }
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub prediction: CountPrediction,
    pub head: HeadOutput,
    pub feature: Vec<f32>,
    pub tap: Tensor,
}

/// Backbone plus counting head for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingStream {
    pub modality: Modality,
    pub backbone: Backbone,
    pub head: CountingHead,
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl CountingStream {
    pub fn new(modality: Modality, backbone: Backbone, head: CountingHead) -> Result<Self> {
        if backbone.feature_dim() != head.config.feature_dim {
            return Err(argument(format!(
                "backbone emits {} features, head expects {}",
                backbone.feature_dim(),
                head.config.feature_dim
            )));
        }
        Ok(Self {
            modality,
            backbone,
            head,
        })
    }

    pub fn run(&self, x: &Tensor) -> Result<StreamOutput> {
        let (feature, tap) = self.backbone.forward(x)?;
        let head = self.head.forward(&to_f64(&feature))?;
        Ok(StreamOutput {
            prediction: CountPrediction::clamped(head.count, self.modality),
            head,
            feature,
            tap,
        })
    }

    /// Raw (unclamped) head count.
    pub fn raw_count(&self, x: &Tensor) -> Result<f64> {
        let (feature, _) = self.backbone.forward(x)?;
        Ok(self.head.forward(&to_f64(&feature))?.count)
    }

    /// Loss of a batch without touching gradients.
    pub fn batch_loss(&self, inputs: &[Tensor], labels: &[f64], action_labels: Option<&[usize]>) -> Result<LossBreakdown> {
        let mut counts = Vec::with_capacity(inputs.len());
        let mut dists = Vec::with_capacity(inputs.len());
        for x in inputs {
            let out = self.run(x)?;
            counts.push(out.head.count);
            dists.push(out.head.class_dist);
        }
        Ok(counting_loss_grad(&counts, labels, &dists, &self.head.config, action_labels)?.loss)
    }

    /// One optimizer step on a batch. Returns the loss before the update.
    pub fn train_batch(
        &mut self,
        inputs: &[Tensor],
        labels: &[f64],
        action_labels: Option<&[usize]>,
        opt: &Sgd,
    ) -> Result<LossBreakdown> {
        let mut caches = Vec::with_capacity(inputs.len());
        let mut feats = Vec::with_capacity(inputs.len());
        let mut outs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (f, c) = self.backbone.forward_cached(x)?;
            let f = to_f64(&f);
            outs.push(self.head.forward(&f)?);
            feats.push(f);
            caches.push(c);
        }
        let counts: Vec<f64> = outs.iter().map(|o| o.count).collect();
        let dists: Vec<Vec<f64>> = outs.iter().map(|o| o.class_dist.clone()).collect();
        let grad = counting_loss_grad(&counts, labels, &dists, &self.head.config, action_labels)?;
        for i in 0..inputs.len() {
            let gf = self.head.backward(&feats[i], &outs[i], grad.grad_counts[i], &grad.grad_dists[i]);
            let gf: Vec<f32> = gf.iter().map(|&g| g as f32).collect();
            self.backbone.backward(&caches[i], &gf)?;
        }
        opt.step(&mut [&mut self.backbone, &mut self.head]);
        Ok(grad.loss)
    }
}

impl Module for CountingStream {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        self.backbone.visit_params(v);
        self.head.visit_params(v);
    }
}
