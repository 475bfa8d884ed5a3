//! Feed-forward layers with explicit forward and backward passes.
//!
//! Layers take a leading batch axis: convolution and pooling see
//! `[N × H × W × C]`, dense layers `[N × features]`. Each forward pass caches
//! what its backward pass needs; calling `backward` without a cached forward
//! is a state error. Parameter gradients accumulate across backward calls
//! until [`Layer::zero_grad`].

mod conv;
mod dense;
mod dropout;
mod pool;

pub use conv::{Conv2DLayer, ConvGradients, Padding};
pub use dense::{DenseGradients, DenseLayer};
pub use dropout::DropoutLayer;
pub use pool::MaxPoolLayer;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A named trainable tensor and its accumulated gradient.
pub struct Param<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
}

pub trait Layer: Send {
    fn name(&self) -> &str;

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Propagates `grad_out` to the input and accumulates parameter gradients.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;

    /// Like [`Layer::backward`] when the input gradient is not needed.
    fn backward_params_only(&mut self, grad_out: &Tensor) -> Result<()> {
        self.backward(grad_out).map(|_| ())
    }

    /// Shape of one output sample given one input sample's shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn params(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<Param<'_>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    fn reseed(&mut self, _seed: u64) {}

    fn clear_cache(&mut self);
}

/// Glorot (Xavier) uniform initialization: `U(±√(6 / (fan_in + fan_out)))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-limit..limit);
    }
    t
}

/// Reshapes `[N × ...]` to `[N × prod(...)]`.
#[derive(Debug, Clone)]
pub struct Flatten {
    name: String,
    cached_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new(name: impl Into<String>) -> Self {
        Flatten {
            name: name.into(),
            cached_shape: None,
        }
    }
}

impl Layer for Flatten {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let n = x.shape()[0];
        let rest = x.len() / n;
        self.cached_shape = Some(x.shape().to_vec());
        x.clone().reshape(&[n, rest])
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .cached_shape
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward without forward", self.name)))?;
        grad_out.clone().reshape(&shape)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(vec![input.iter().product()])
    }

    fn clear_cache(&mut self) {
        self.cached_shape = None;
    }
}

/// An ordered stack of layers.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    /// Backpropagates through every layer; the gradient with respect to the
    /// stack input is only computed when `need_input_grad` is set.
    pub fn backward(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if i == 0 && !need_input_grad {
                layer.backward_params_only(&g)?;
                return Ok(None);
            }
            g = layer.backward(&g)?;
        }
        Ok(Some(g))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.zero_grad();
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.reseed(seed.wrapping_add(i as u64));
        }
    }

    pub fn clear_cache(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }
}

pub(crate) fn missing_cache(name: &str) -> Error {
    Error::State(format!("{name}: backward called without a cached forward pass"))
}
