//! Dense row-major `f64` tensors and the primitive operations the layers use.
//!
//! There is no broadcasting: binary operations require identical shapes and
//! any reshaping is explicit at the call site.

pub mod io;
pub mod kernels;

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor rank must be at least 1"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::dim(format!("extent {pos} of shape {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for internal construction with known-good extents.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![std::hint::black_box(value); len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return None;
        }
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        Some(self.data[offset])
    }

    /// Slice of the `i`-th sub-tensor along the leading axis.
    pub fn outer(&self, i: usize) -> &[f64] {
        let step = self.data.len() / self.shape[0];
        &self.data[i * step..(i + 1) * step]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix_dims("transpose")?;
        Ok(Tensor {
            shape: vec![c, r],
            data: kernels::transpose(r, c, &self.data),
        })
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty list"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::dim(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            data.extend_from_slice(p.data());
        }
        Tensor::new(&shape, data)
    }

    fn as_matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(format!("{what} expects a rank-2 tensor, got {other:?}"))),
        }
    }
}

/// Matrix product `[m×k] · [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix_dims("matmul")?;
    let (k2, n) = b.as_matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = kernels::zeroed(m * n);
    kernels::gemm_acc(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(&[m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
}

pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op:?} needs identical shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let f = match op {
        ElementwiseOp::Add => |x: f64, y: f64| x + y,
        ElementwiseOp::Sub => |x: f64, y: f64| x - y,
        ElementwiseOp::Hadamard => |x: f64, y: f64| x * y,
    };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Sub, self, other)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Hadamard, self, other)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the activation output `y = f(v)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    // Both branches avoid overflow of exp for large |v|.
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// Softmax of a rank-1 tensor, shifted by its maximum.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::dim(format!("softmax expects rank 1, got {:?}", x.shape())));
    }
    let mut out = x.data().to_vec();
    softmax_in_place(&mut out);
    Tensor::vector(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax of a `[rows × cols]` matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.as_matrix_dims("softmax_rows")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[], vec![]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        let x = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(x.strides(), vec![12, 4, 1]);
        let y = t(&[2, 3], &[0., 1., 2., 3., 4., 5.]);
        assert_eq!(y.get(&[1, 2]), Some(5.0));
        assert_eq!(y.get(&[2, 0]), None);
    }

    #[test]
    fn matmul_identity() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
    }

    #[test]
    fn matmul_row_times_column() {
        let out = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(out, t(&[1, 1], &[11.]));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let z = t(&[3], &[0., 0., 0.]);
        assert_eq!(t(&[3], &[1., 2., 3.]).hadamard(&z).unwrap(), z);
        assert_eq!(t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);
        assert_eq!(t(&[2], &[2., 3.]).hadamard(&t(&[2], &[4., 5.])).unwrap().data(), &[8., 15.]);
        assert!(matches!(
            t(&[2], &[1., 2.]).sub(&t(&[3], &[1., 2., 3.])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn activation_examples() {
        let zero = t(&[1], &[0.]);
        assert_eq!(activation(Activation::Sigmoid, &zero).data(), &[0.5]);
        assert_eq!(activation(Activation::Tanh, &zero).data(), &[0.0]);
        let s2 = activation(Activation::Sigmoid, &t(&[1], &[2.])).data()[0];
        assert!((s2 - 0.880797).abs() < 1e-6);
        assert_eq!(activation(Activation::Relu, &t(&[2], &[-1., 2.])).data(), &[0., 2.]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0., 0.])).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(softmax(&t(&[2], &[1000., 1000.])).unwrap().data(), &[0.5, 0.5]);
        let p = softmax(&t(&[2], &[1., 2.])).unwrap();
        assert!((p.data()[0] - 0.268941).abs() < 1e-6);
        assert!((p.data()[1] - 0.731059).abs() < 1e-6);
        assert!(softmax(&Tensor::zeros(&[2, 2])).is_err());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
            let x = Tensor::vector(v.clone()).unwrap();
            let p = softmax(&x).unwrap();
            // The shift must survive the max subtraction without rounding for
            // exact equality, so keep it on a coarse grid.
            let c = c.round();
            let v2: Vec<f64> = v.iter().map(|x| x + c).collect();
            let shifted: Vec<f64> = v2.iter().map(|x| x - c).collect();
            if shifted == v {
                let q = softmax(&Tensor::vector(v2).unwrap()).unwrap();
                prop_assert_eq!(p.data(), q.data());
            }
            let total: f64 = p.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn sigmoid_is_symmetric(x in -30.0f64..30.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ops_are_pure(a in small_matrix(3, 3), b in small_matrix(3, 3)) {
            let (a0, b0) = (a.clone(), b.clone());
            let first = matmul(&a, &b).unwrap();
            let second = matmul(&a, &b).unwrap();
            prop_assert_eq!(&a, &a0);
            prop_assert_eq!(&b, &b0);
            prop_assert!(first.data().iter().zip(second.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            let h = a.hadamard(&b).unwrap();
            prop_assert_eq!(h.shape(), a.shape());
        }
    }
}
