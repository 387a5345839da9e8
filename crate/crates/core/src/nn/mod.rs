//! A small CPU neural-network engine: NCHW f32 tensors, layers with explicit
//! forward/backward passes, and Adam.
//!
//! Layers never keep activations themselves. Forward passes in training mode
//! return caches that the caller hands back to the matching backward pass;
//! parameter gradients accumulate into each [`Param`].

mod adam;
mod gemm;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    concat_channels, max_pool2, max_pool2_backward, relu_inplace, split_channels, BatchNorm2d, BnCache,
    Conv2d, ConvBnRelu, ConvTranspose2x2, DoubleConv, DoubleConvCache, Linear,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Tensor { shape, data }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements of one sample.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A named-by-position parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Buffers (batch-norm running statistics) are saved but not optimized.
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Param::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn buffer(shape: &[usize], v: f32) -> Self {
        let mut p = Param::filled(shape, v);
        p.trainable = false;
        p
    }

    /// He-normal initialization with the given fan-in.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Param::zeros(shape);
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        p.value.iter_mut().for_each(|x| *x = normal.sample(rng));
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visits every parameter under a stable hierarchical name.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
