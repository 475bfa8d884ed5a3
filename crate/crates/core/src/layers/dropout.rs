use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{missing_cache, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inverted dropout: in training each value is zeroed with probability `p`
/// and survivors are scaled by `1 / (1 − p)`; inference is the identity.
pub struct DropoutLayer {
    name: String,
    p: f64,
    rng: ChaCha8Rng,
    cache: Option<DropCache>,
}

enum DropCache {
    Identity,
    Mask(Vec<f64>),
}

impl DropoutLayer {
    pub fn new(name: impl Into<String>, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(DropoutLayer {
            name: name.into(),
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: None,
        })
    }

    pub fn probability(&self) -> f64 {
        self.p
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Infer || self.p == 0.0 {
            self.cache = Some(DropCache::Identity);
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.cache = Some(DropCache::Mask(mask));
        Tensor::new(x.shape(), data)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self.cache.take().ok_or_else(|| missing_cache(&self.name))? {
            DropCache::Identity => Ok(grad_out.clone()),
            DropCache::Mask(mask) => {
                if mask.len() != grad_out.len() {
                    return Err(Error::dim(format!(
                        "{}: grad_out has {} values, mask has {}",
                        self.name,
                        grad_out.len(),
                        mask.len()
                    )));
                }
                let data = grad_out.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
                Tensor::new(grad_out.shape(), data)
            }
        }
    }
}

impl Layer for DropoutLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        DropoutLayer::forward(self, x, mode)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        DropoutLayer::backward(self, grad_out)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}
