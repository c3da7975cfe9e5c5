use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A trainable parameter vector with its gradient and momentum buffers.
///
/// Only the values are serialized; gradients and velocity start at zero
/// after loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<T>", into = "Vec<T>")]
#[serde(bound(serialize = "T: Float + Serialize", deserialize = "T: Float + Deserialize<'de>"))]
pub struct Param<T: Float = f32> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

impl<T: Float> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

impl<T: Float> From<Vec<T>> for Param<T> {
    fn from(value: Vec<T>) -> Self {
        Self::new(value)
    }
}

impl<T: Float> From<Param<T>> for Vec<T> {
    fn from(p: Param<T>) -> Self {
        p.value
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `[-a, a]` with `a = gain * sqrt(3 / fan_in)`.
    Uniform { gain: f64 },
}

impl Init {
    pub const HE: Init = Init::Uniform {
        gain: std::f64::consts::SQRT_2,
    };

    pub fn sample<T: Float, R: Rng + ?Sized>(&self, n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
        match *self {
            Init::Zeros => vec![T::zero(); n],
            Init::Uniform { gain } => {
                let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| T::from(rng.random_range(-a..=a)).unwrap())
                    .collect()
            }
        }
    }
}

pub trait ParamVisitor {
    fn visit_f32(&mut self, p: &mut Param<f32>);
    fn visit_f64(&mut self, p: &mut Param<f64>);
}

/// Anything that owns trainable parameters.
pub trait Module {
    fn visit_params(&mut self, v: &mut dyn ParamVisitor);

    fn zero_grad(&mut self) {
        struct Zero;
        impl ParamVisitor for Zero {
            fn visit_f32(&mut self, p: &mut Param<f32>) {
                p.zero_grad();
            }
            fn visit_f64(&mut self, p: &mut Param<f64>) {
                p.zero_grad();
            }
        }
        self.visit_params(&mut Zero);
    }

    fn num_params(&mut self) -> usize {
        struct Count(usize);
        impl ParamVisitor for Count {
            fn visit_f32(&mut self, p: &mut Param<f32>) {
                self.0 += p.len();
            }
            fn visit_f64(&mut self, p: &mut Param<f64>) {
                self.0 += p.len();
            }
        }
        let mut c = Count(0);
        self.visit_params(&mut c);
        c.0
    }
}
