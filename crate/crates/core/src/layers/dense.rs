use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, missing_cache, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm_fast, zeroed};
use crate::tensor::{Activation, Tensor};

/// Fully connected layer `y = act(x·W + b)` with `W: [in × out]`.
pub struct DenseLayer {
    name: String,
    activation: Activation,
    weights: Tensor,
    bias: Tensor,
    grad_weights: Tensor,
    grad_bias: Tensor,
    cache: Option<DenseCache>,
}

struct DenseCache {
    input: Tensor,
    output: Tensor,
}

pub struct DenseGradients {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(
        name: impl Into<String>,
        inputs: usize,
        units: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if inputs == 0 || units == 0 {
            return Err(Error::Config(format!(
                "dense layer needs positive sizes, got {inputs}→{units}"
            )));
        }
        let weights = glorot_uniform(&[inputs, units], inputs, units, rng);
        Self::from_weights(name, weights, Tensor::zeros(&[units]), activation)
    }

    pub fn from_weights(
        name: impl Into<String>,
        weights: Tensor,
        bias: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        let [_, units] = *weights.shape() else {
            return Err(Error::dim(format!(
                "dense weights must be [in × out], got {:?}",
                weights.shape()
            )));
        };
        if bias.shape() != [units] {
            return Err(Error::dim(format!(
                "dense bias must be [{units}], got {:?}",
                bias.shape()
            )));
        }
        Ok(DenseLayer {
            name: name.into(),
            activation,
            grad_weights: Tensor::zeros(weights.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            weights,
            bias,
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn rows(&self, x: &Tensor) -> Result<usize> {
        match *x.shape() {
            [f] if f == self.inputs() => Ok(1),
            [n, f] if f == self.inputs() => Ok(n),
            _ => Err(Error::dim(format!(
                "{}: expected [{}] or [N×{}], got {:?}",
                self.name,
                self.inputs(),
                self.inputs(),
                x.shape()
            ))),
        }
    }

    /// Applies the layer to `[in]` or `[N × in]`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = self.rows(x)?;
        let units = self.units();
        let mut out = Vec::with_capacity(n * units);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm_fast(n, self.inputs(), units, x.data(), false, self.weights.data(), false, &mut out);
        for v in &mut out {
            *v = self.activation.apply(*v);
        }
        let shape = if x.rank() == 1 { vec![units] } else { vec![n, units] };
        let output = Tensor::new(&shape, out)?;
        self.cache = Some(DenseCache {
            input: x.clone(),
            output: output.clone(),
        });
        Ok(output)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<DenseGradients> {
        let (input, weights, bias) = self.backward_impl(grad_out, true)?;
        Ok(DenseGradients {
            input: input.expect("input gradient requested"),
            weights,
            bias,
        })
    }

    fn backward_impl(
        &mut self,
        grad_out: &Tensor,
        need_input: bool,
    ) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        if grad_out.shape() != cache.output.shape() {
            return Err(Error::dim(format!(
                "{}: grad_out {:?} does not match output {:?}",
                self.name,
                grad_out.shape(),
                cache.output.shape()
            )));
        }
        let n = self.rows(&cache.input)?;
        let (inputs, units) = (self.inputs(), self.units());
        // Gradient at the pre-activation.
        let dz: Vec<f64> = grad_out
            .data()
            .iter()
            .zip(cache.output.data())
            .map(|(&g, &y)| g * self.activation.derivative_from_output(y))
            .collect();

        let mut db = zeroed(units);
        for row in dz.chunks_exact(units) {
            for (b, v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
        let mut dw = zeroed(inputs * units);
        gemm_fast(inputs, n, units, cache.input.data(), true, &dz, false, &mut dw);

        let dx = if need_input {
            let mut dx = zeroed(n * inputs);
            gemm_fast(n, units, inputs, &dz, false, self.weights.data(), true, &mut dx);
            Some(Tensor::new(cache.input.shape(), dx)?)
        } else {
            None
        };
        Ok((
            dx,
            Tensor::new(self.weights.shape(), dw)?,
            Tensor::vector(db)?,
        ))
    }

    fn accumulate(&mut self, weights: &Tensor, bias: &Tensor) {
        for (a, g) in self.grad_weights.data_mut().iter_mut().zip(weights.data()) {
            *a += g;
        }
        for (a, g) in self.grad_bias.data_mut().iter_mut().zip(bias.data()) {
            *a += g;
        }
    }
}

impl Layer for DenseLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        DenseLayer::forward(self, x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (input, weights, bias) = self.backward_impl(grad_out, true)?;
        self.accumulate(&weights, &bias);
        Ok(input.expect("input gradient requested"))
    }

    fn backward_params_only(&mut self, grad_out: &Tensor) -> Result<()> {
        let (_, weights, bias) = self.backward_impl(grad_out, false)?;
        self.accumulate(&weights, &bias);
        Ok(())
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.inputs()] {
            return Err(Error::dim(format!(
                "{}: expected [{}], got {input:?}",
                self.name,
                self.inputs()
            )));
        }
        Ok(vec![self.units()])
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.weight", self.name), &self.weights),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<Param<'_>> {
        vec![
            Param {
                name: format!("{}.weight", self.name),
                value: &mut self.weights,
                grad: &mut self.grad_weights,
            },
            Param {
                name: format!("{}.bias", self.name),
                value: &mut self.bias,
                grad: &mut self.grad_bias,
            },
        ]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gradcheck::{numeric_grad, project, relative_error};
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn identity_weights_linear_is_identity() {
        let id = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let mut d = DenseLayer::from_weights("d", id, Tensor::zeros(&[3]), Activation::Linear).unwrap();
        let x = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_yields_activated_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_tensor(&[4, 2], &mut rng);
        let b = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let mut d = DenseLayer::from_weights("d", w, b, Activation::Sigmoid).unwrap();
        let y = d.forward(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(y.data(), &[crate::tensor::sigmoid(0.3), crate::tensor::sigmoid(-0.7)]);
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = DenseLayer::new("d", 4, 2, Activation::Tanh, &mut rng).unwrap();
        assert!(matches!(d.forward(&Tensor::zeros(&[3])), Err(Error::Dimension(_))));
        assert!(matches!(d.backward(&Tensor::zeros(&[2])), Err(Error::State(_))));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Linear, Activation::Relu] {
            let w = random_tensor(&[5, 3], &mut rng);
            let b = random_tensor(&[3], &mut rng);
            let x = random_tensor(&[4, 5], &mut rng);
            let proj = random_tensor(&[4, 3], &mut rng);
            let mut d = DenseLayer::from_weights("d", w.clone(), b.clone(), act).unwrap();
            d.forward(&x).unwrap();
            let g = d.backward(&proj).unwrap();
            let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
                let mut d = DenseLayer::from_weights("d", w.clone(), b.clone(), act).unwrap();
                project(&d.forward(x).unwrap(), &proj)
            };
            let nx = numeric_grad(&x, 1e-5, |x| eval(x, &w, &b));
            let nw = numeric_grad(&w, 1e-5, |w| eval(&x, w, &b));
            let nb = numeric_grad(&b, 1e-5, |b| eval(&x, &w, b));
            assert!(relative_error(g.input.data(), &nx) < 1e-4, "{act:?}");
            assert!(relative_error(g.weights.data(), &nw) < 1e-4, "{act:?}");
            assert!(relative_error(g.bias.data(), &nb) < 1e-4, "{act:?}");
        }
    }
}
