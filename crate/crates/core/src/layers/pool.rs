use super::{missing_cache, Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling over `window × window` blocks. Ties go to the first element
/// in row-major scan order.
pub struct MaxPoolLayer {
    name: String,
    window: usize,
    stride: usize,
    cache: Option<PoolCache>,
}

struct PoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of the maximum for every output element.
    argmax: Vec<usize>,
}

impl MaxPoolLayer {
    /// The conventional 2×2, stride-2 pool.
    pub fn new(name: impl Into<String>) -> Self {
        Self::with_window(name, 2, 2)
    }

    pub fn with_window(name: impl Into<String>, window: usize, stride: usize) -> Self {
        assert!(window >= 1 && stride >= 1, "pool window and stride must be positive");
        MaxPoolLayer {
            name: name.into(),
            window,
            stride,
            cache: None,
        }
    }

    fn out_extent(&self, input: usize) -> Result<usize> {
        if input < self.window {
            return Err(Error::dim(format!(
                "{}: extent {input} smaller than pool window {}",
                self.name, self.window
            )));
        }
        Ok((input - self.window) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = match *x.shape() {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::dim(format!(
                    "{}: expected [H×W×C] or [N×H×W×C], got {:?}",
                    self.name,
                    x.shape()
                )))
            }
        };
        let oh = self.out_extent(h)?;
        let ow = self.out_extent(w)?;
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        let data = x.data();
        for b in 0..n {
            let base = b * h * w * c;
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = base + ((oy * self.stride) * w + ox * self.stride) * c + ch;
                        let mut best = data[best_idx];
                        for ky in 0..self.window {
                            for kx in 0..self.window {
                                let idx = base
                                    + ((oy * self.stride + ky) * w + ox * self.stride + kx) * c
                                    + ch;
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        self.cache = Some(PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        });
        let shape = if x.rank() == 3 {
            vec![oh, ow, c]
        } else {
            vec![n, oh, ow, c]
        };
        Tensor::new(&shape, out)
    }

    /// Routes each output gradient to the input position that won the max.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::dim(format!(
                "{}: grad_out has {} values, forward produced {}",
                self.name,
                grad_out.len(),
                cache.argmax.len()
            )));
        }
        let mut grad_in = Tensor::zeros(&cache.input_shape);
        let gi = grad_in.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
            gi[idx] += g;
        }
        Ok(grad_in)
    }
}

impl Layer for MaxPoolLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        MaxPoolLayer::forward(self, x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        MaxPoolLayer::backward(self, grad_out)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [h, w, c] = *input else {
            return Err(Error::dim(format!("{}: expected [H×W×C], got {input:?}", self.name)));
        };
        Ok(vec![self.out_extent(h)?, self.out_extent(w)?, c])
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gradcheck::{numeric_grad, project, relative_error};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unique_max_routes_to_its_position() {
        let mut pool = MaxPoolLayer::new("p");
        let x = Tensor::new(&[2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let out = pool.forward(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
        let g = pool.backward(&Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn ties_pick_first_in_scan_order() {
        let mut pool = MaxPoolLayer::new("p");
        pool.forward(&Tensor::full(&[2, 2, 1], 7.0)).unwrap();
        let g = pool.backward(&Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn channels_pool_independently() {
        let mut pool = MaxPoolLayer::new("p");
        // channel 0 max at (0,1), channel 1 max at (1,0)
        let x = Tensor::new(&[2, 2, 2], vec![0., 5., 9., 1., 2., 8., 3., 4.]).unwrap();
        let out = pool.forward(&x).unwrap();
        assert_eq!(out.data(), &[9., 8.]);
    }

    #[test]
    fn conserves_gradient_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut x = Tensor::zeros(&[3, 6, 6, 2]);
            for v in x.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let mut pool = MaxPoolLayer::new("p");
            let out = pool.forward(&x).unwrap();
            let mut g = Tensor::zeros(out.shape());
            for v in g.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let gi = pool.backward(&g).unwrap();
            assert!((gi.sum() - g.sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Distinct, well separated values keep every argmax stable under ±ε.
        let mut vals: Vec<f64> = (0..64).map(|i| i as f64 * 0.01).collect();
        vals.shuffle(&mut rng);
        let x = Tensor::new(&[4, 8, 2], vals).unwrap();
        let mut pool = MaxPoolLayer::new("p");
        let out = pool.forward(&x).unwrap();
        let mut proj = Tensor::zeros(out.shape());
        for v in proj.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let g = pool.backward(&proj).unwrap();
        let num = numeric_grad(&x, 1e-5, |x| {
            let mut p = MaxPoolLayer::new("p");
            project(&p.forward(x).unwrap(), &proj)
        });
        assert!(relative_error(g.data(), &num) < 1e-4);
    }

    #[test]
    fn backward_needs_forward() {
        let mut pool = MaxPoolLayer::new("p");
        assert!(matches!(
            pool.backward(&Tensor::zeros(&[1, 1, 1])),
            Err(Error::State(_))
        ));
    }
}
