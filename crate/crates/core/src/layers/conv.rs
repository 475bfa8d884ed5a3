use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, missing_cache, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm_fast, zeroed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output extent is `⌈H / s⌉`; any odd
    /// remainder of padding goes to the bottom/right edge.
    Same,
    /// No padding: output extent `⌊(H − w) / s⌋ + 1`.
    Valid,
}

impl Padding {
    /// Output extent and leading pad for one spatial axis.
    pub fn geometry(self, input: usize, window: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + window).saturating_sub(input);
                Some((out, total / 2))
            }
            Padding::Valid => {
                if input < window {
                    None
                } else {
                    Some(((input - window) / stride + 1, 0))
                }
            }
        }
    }
}

/// 2-D cross-correlation with `filters` kernels of size `window × window`.
///
/// Weights are stored `[filters × window × window × in_channels]`.
pub struct Conv2DLayer {
    name: String,
    window: usize,
    stride: usize,
    padding: Padding,
    weights: Tensor,
    bias: Tensor,
    grad_weights: Tensor,
    grad_bias: Tensor,
    cache: Option<Tensor>,
}

pub struct ConvGradients {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

struct Geometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Conv2DLayer {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        filters: usize,
        window: usize,
        stride: usize,
        padding: Padding,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_channels == 0 || filters == 0 || window == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv needs positive channels/filters/window/stride, got c={in_channels} r={filters} w={window} s={stride}"
            )));
        }
        let fan_in = window * window * in_channels;
        let fan_out = window * window * filters;
        let weights = glorot_uniform(&[filters, window, window, in_channels], fan_in, fan_out, rng);
        Self::from_weights(name, weights, Tensor::zeros(&[filters]), stride, padding)
    }

    pub fn from_weights(
        name: impl Into<String>,
        weights: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [r, wh, ww, _c] = *weights.shape() else {
            return Err(Error::dim(format!(
                "conv weights must be [r × w × w × c], got {:?}",
                weights.shape()
            )));
        };
        if wh != ww {
            return Err(Error::dim(format!("conv window must be square, got {wh}×{ww}")));
        }
        if bias.shape() != [r] {
            return Err(Error::dim(format!("conv bias must be [{r}], got {:?}", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        Ok(Conv2DLayer {
            name: name.into(),
            window: wh,
            stride,
            padding,
            grad_weights: Tensor::zeros(weights.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            weights,
            bias,
            cache: None,
        })
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
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

    /// Output spatial extents for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = self.geometry(h, w)?;
        Ok((g.out_h, g.out_w))
    }

    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let too_small = || {
            Error::dim(format!(
                "{}: input {h}×{w} smaller than window {}",
                self.name, self.window
            ))
        };
        let (out_h, pad_top) = self
            .padding
            .geometry(h, self.window, self.stride)
            .ok_or_else(too_small)?;
        let (out_w, pad_left) = self
            .padding
            .geometry(w, self.window, self.stride)
            .ok_or_else(too_small)?;
        Ok(Geometry {
            in_h: h,
            in_w: w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn batch_dims(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
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
        if c != self.in_channels() {
            return Err(Error::dim(format!(
                "{}: input has {c} channels, layer expects {}",
                self.name,
                self.in_channels()
            )));
        }
        Ok((n, h, w, c))
    }

    /// Unfolds one image into `[P × K]` patch rows, `P = out_h·out_w`,
    /// `K = window²·channels`, ordered `(ky, kx, c)` to match the weights.
    fn im2col(&self, img: &[f64], g: &Geometry, c: usize, col: &mut [f64]) {
        let w = self.window;
        let k = w * w * c;
        col.fill(0.0);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut col[(oy * g.out_w + ox) * k..(oy * g.out_w + ox + 1) * k];
                for ky in 0..w {
                    let iy = (oy * self.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..w {
                        let ix = (ox * self.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * c;
                        let dst = (ky * w + kx) * c;
                        row[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], g: &Geometry, c: usize, img: &mut [f64]) {
        let w = self.window;
        let k = w * w * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &col[(oy * g.out_w + ox) * k..(oy * g.out_w + ox + 1) * k];
                for ky in 0..w {
                    let iy = (oy * self.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..w {
                        let ix = (ox * self.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.in_w + ix as usize) * c;
                        let src = (ky * w + kx) * c;
                        for (d, s) in img[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    /// Convolves `x` (`[H×W×C]` or batched `[N×H×W×C]`) and caches it.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = self.batch_dims(x)?;
        let g = self.geometry(h, w)?;
        let r = self.filters();
        let k = self.window * self.window * c;
        let p = g.out_h * g.out_w;
        let mut col = zeroed(p * k);
        let mut out = zeroed(n * p * r);
        for (img, dst) in x.data().chunks_exact(h * w * c).zip(out.chunks_exact_mut(p * r)) {
            self.im2col(img, &g, c, &mut col);
            for row in dst.chunks_exact_mut(r) {
                row.copy_from_slice(self.bias.data());
            }
            gemm_fast(p, k, r, &col, false, self.weights.data(), true, dst);
        }
        self.cache = Some(x.clone());
        let shape: Vec<usize> = if x.rank() == 3 {
            vec![g.out_h, g.out_w, r]
        } else {
            vec![n, g.out_h, g.out_w, r]
        };
        Tensor::new(&shape, out)
    }

    /// Gradients of the last cached forward pass. Does not touch the
    /// layer's gradient accumulators.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<ConvGradients> {
        let (input, weights, bias) = self.backward_impl(grad_out, true)?;
        Ok(ConvGradients {
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
        let x = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        let (n, h, w, c) = self.batch_dims(&x)?;
        let g = self.geometry(h, w)?;
        let r = self.filters();
        let k = self.window * self.window * c;
        let p = g.out_h * g.out_w;
        if grad_out.len() != n * p * r {
            return Err(Error::dim(format!(
                "{}: grad_out {:?} does not match forward output {n}×{}×{}×{r}",
                self.name,
                grad_out.shape(),
                g.out_h,
                g.out_w
            )));
        }
        let mut col = zeroed(p * k);
        let mut dcol = zeroed(p * k);
        let mut dw = zeroed(r * k);
        let mut db = zeroed(r);
        let mut dx = if need_input {
            zeroed(x.len())
        } else {
            Vec::new()
        };
        for (i, (img, gout)) in x
            .data()
            .chunks_exact(h * w * c)
            .zip(grad_out.data().chunks_exact(p * r))
            .enumerate()
        {
            for row in gout.chunks_exact(r) {
                for (b, v) in db.iter_mut().zip(row) {
                    *b += v;
                }
            }
            self.im2col(img, &g, c, &mut col);
            gemm_fast(r, p, k, gout, true, &col, false, &mut dw);
            if need_input {
                dcol.fill(0.0);
                gemm_fast(p, r, k, gout, false, self.weights.data(), false, &mut dcol);
                self.col2im_add(&dcol, &g, c, &mut dx[i * h * w * c..(i + 1) * h * w * c]);
            }
        }
        let weights = Tensor::new(self.weights.shape(), dw)?;
        let bias = Tensor::vector(db)?;
        let input = if need_input {
            Some(Tensor::new(x.shape(), dx)?)
        } else {
            None
        };
        Ok((input, weights, bias))
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

impl Layer for Conv2DLayer {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        Conv2DLayer::forward(self, x)
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
        let [h, w, c] = *input else {
            return Err(Error::dim(format!("{}: expected [H×W×C], got {input:?}", self.name)));
        };
        if c != self.in_channels() {
            return Err(Error::dim(format!(
                "{}: input has {c} channels, layer expects {}",
                self.name,
                self.in_channels()
            )));
        }
        let (oh, ow) = self.output_dims(h, w)?;
        Ok(vec![oh, ow, self.filters()])
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
