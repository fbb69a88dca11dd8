//! Minimal CPU network engine: layers with explicit forward/backward passes.
//!
//! Every layer offers two forward paths. [`Layer::forward`] is a pure
//! inference pass over `&self` and can run concurrently on a shared,
//! frozen network. [`Layer::forward_train`] records whatever the matching
//! [`Layer::backward`] call needs and, for batch-norm, uses batch
//! statistics. Parameter gradients accumulate until [`zero_grad`].

mod kernels;
mod layers;

pub use kernels::{col2im, gemm, im2col, Window};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, GlobalAvgPool, LeakyRelu, Linear, Relu, Reshape, ResidualUnit, Sigmoid};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::Tensor;

/// A named parameter tensor. Non-trainable entries hold running statistics.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Param {
            value: vec![v; n],
            grad: vec![0.0; n],
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn gaussian(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let normal = Normal::new(0.0f32, std).expect("finite std");
        for v in p.value.iter_mut() {
            *v = normal.sample(rng);
        }
        p
    }

    pub fn buffer(shape: &[usize], v: f32) -> Self {
        Param {
            trainable: false,
            ..Self::filled(shape, v)
        }
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, &Param) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, &mut Param) + 'a;

pub trait Layer: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor>;
    /// Consumes the cache of the last `forward_train`; returns the input gradient.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn visit(&self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}
    fn visit_mut(&mut self, _prefix: &str, _f: &mut ParamVisitorMut<'_>) {}
}

/// Anything with named parameters.
pub trait Network {
    fn params(&self, f: &mut ParamVisitor<'_>);
    fn params_mut(&mut self, f: &mut ParamVisitorMut<'_>);

    fn zero_grad(&mut self) {
        self.params_mut(&mut |_, p| p.grad.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.params(&mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.params(&mut |_, p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }
}

impl<L: Layer + ?Sized> Network for L {
    fn params(&self, f: &mut ParamVisitor<'_>) {
        Layer::visit(self, "", f)
    }
    fn params_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        Layer::visit_mut(self, "", f)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (_, l) in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (_, l) in &mut self.layers {
            cur = l.forward_train(&cur)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (name, l) in &self.layers {
            l.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (name, l) in &mut self.layers {
            l.visit_mut(&join(prefix, name), f);
        }
    }
}

pub fn zero_grad(layer: &mut dyn Layer) {
    layer.visit_mut("", &mut |_, p| p.grad.fill(0.0));
}

/// Zero-mean Gaussian weight initialization.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal {
        std: f32,
    },
    /// `std = gain / sqrt(fan_in)`.
    FanIn {
        gain: f32,
    },
}

impl Init {
    pub fn std(self, fan_in: usize) -> f32 {
        match self {
            Init::Normal { std } => std,
            Init::FanIn { gain } => gain / (fan_in.max(1) as f32).sqrt(),
        }
    }
}

#[cfg(test)]
mod gradcheck;
