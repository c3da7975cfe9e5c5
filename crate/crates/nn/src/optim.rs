use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::param::{Module, Param, ParamVisitor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the joint gradient to at most this L2 norm before stepping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config }
    }

    /// Applies one update to every parameter reachable from `modules`, then
    /// clears their gradients. Returns the pre-clipping gradient norm.
    pub fn step(&self, modules: &mut [&mut dyn Module]) -> f64 {
        let norm = grad_norm(modules);
        let scale = match self.config.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        let mut upd = Update {
            cfg: self.config,
            scale,
        };
        for m in modules.iter_mut() {
            m.visit_params(&mut upd);
        }
        norm
    }
}

struct Update {
    cfg: SgdConfig,
    scale: f64,
}

impl Update {
    fn apply<T: Float>(&self, p: &mut Param<T>) {
        let lr = T::from(self.cfg.learning_rate).unwrap();
        let mu = T::from(self.cfg.momentum).unwrap();
        let wd = T::from(self.cfg.weight_decay).unwrap();
        let s = T::from(self.scale).unwrap();
        for ((w, g), v) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(p.velocity.iter_mut()) {
            let d = *g * s + wd * *w;
            *v = mu * *v + d;
            *w = *w - lr * *v;
            *g = T::zero();
        }
    }
}

impl ParamVisitor for Update {
    fn visit_f32(&mut self, p: &mut Param<f32>) {
        self.apply(p);
    }
    fn visit_f64(&mut self, p: &mut Param<f64>) {
        self.apply(p);
    }
}

fn grad_norm(modules: &mut [&mut dyn Module]) -> f64 {
    struct Sq(f64);
    impl ParamVisitor for Sq {
        fn visit_f32(&mut self, p: &mut Param<f32>) {
            self.0 += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        }
        fn visit_f64(&mut self, p: &mut Param<f64>) {
            self.0 += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
    }
    let mut sq = Sq(0.0);
    for m in modules.iter_mut() {
        m.visit_params(&mut sq);
    }
    sq.0.sqrt()
}

/// Scales gradients in place so their joint norm is at most `max_norm`.
pub fn clip_grad_norm(modules: &mut [&mut dyn Module], max_norm: f64) -> f64 {
    struct Scale(f64);
    impl ParamVisitor for Scale {
        fn visit_f32(&mut self, p: &mut Param<f32>) {
            p.grad.iter_mut().for_each(|g| *g *= self.0 as f32);
        }
        fn visit_f64(&mut self, p: &mut Param<f64>) {
            p.grad.iter_mut().for_each(|g| *g *= self.0);
        }
    }
    let norm = grad_norm(modules);
    if norm > max_norm && norm > 0.0 {
        let mut s = Scale(max_norm / norm);
        for m in modules.iter_mut() {
            m.visit_params(&mut s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        w: Param<f32>,
    }

    impl Module for Quad {
        fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
            v.visit_f32(&mut self.w);
        }
    }

    #[test]
    fn plain_sgd_moves_against_gradient() {
        let mut q = Quad {
            w: Param::new(vec![1.0, -2.0]),
        };
        q.w.grad = vec![0.5, -1.0];
        let opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        opt.step(&mut [&mut q]);
        assert!((q.w.value[0] - 0.95).abs() < 1e-7);
        assert!((q.w.value[1] + 1.9).abs() < 1e-7);
        assert_eq!(q.w.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut q = Quad {
            w: Param::new(vec![0.0]),
        };
        q.w.grad = vec![100.0];
        let opt = Sgd::new(SgdConfig {
            learning_rate: 1.0,
            clip_norm: Some(1.0),
            ..Default::default()
        });
        let n = opt.step(&mut [&mut q]);
        assert_eq!(n, 100.0);
        assert!((q.w.value[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn momentum_accumulates() {
        let mut q = Quad {
            w: Param::new(vec![0.0]),
        };
        let opt = Sgd::new(SgdConfig {
            learning_rate: 1.0,
            momentum: 0.5,
            ..Default::default()
        });
        q.w.grad = vec![1.0];
        opt.step(&mut [&mut q]);
        q.w.grad = vec![1.0];
        opt.step(&mut [&mut q]);
        // v1 = 1, v2 = 1.5
        assert!((q.w.value[0] + 2.5).abs() < 1e-6);
    }
}
