//! Dense row-major tensors and a small reverse-mode autodiff tape.
//!
//! [`Tensor`] is the storage type for parameters and eager results. It always
//! holds 32-bit values. Differentiable computation happens on a [`Graph`],
//! which is generic over the working precision: `f32` for training and `f64`
//! when gradients are compared against finite differences.

pub mod gradcheck;
pub mod graph;
pub mod kernels;

use std::fmt::Debug;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use gradcheck::finite_difference_check;
pub use graph::{Grads, Graph, Var};

/// Working precision of a [`Graph`].
pub trait Element:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `f32` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as trainable (or frozen) and drops any stale gradient.
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. Frozen tensors ignore the call.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of {} elements",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    Tensor::new(vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n))
}

/// Row-wise softmax over the last axis, with an optional additive mask whose
/// entries are `0` or `-inf`.
pub fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let cols = *x.shape.last().ok_or_else(|| Error::dim("softmax of a scalar"))?;
    if let Some(m) = mask {
        if m.shape != x.shape {
            return Err(Error::dim(format!(
                "mask shape {:?} differs from input {:?}",
                m.shape, x.shape
            )));
        }
        if m.data.iter().any(|&v| v != 0.0 && v != f32::NEG_INFINITY) {
            return Err(Error::Contract("mask entries must be 0 or -inf".into()));
        }
    }
    let mut out = vec![0.0f32; x.data.len()];
    for (r, (row, o)) in x.data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mrow = mask.map(|m| &m.data[r * cols..(r + 1) * cols]);
        if !kernels::softmax_row(row, mrow, o) {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub const RMS_NORM_EPS: f64 = 1e-5;

/// `y_i = w_i · x_i / sqrt(mean(x²) + ε)` over the last axis.
pub fn rms_norm(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let d = *x.shape.last().ok_or_else(|| Error::dim("rms_norm of a scalar"))?;
    if weight.numel() != d {
        return Err(Error::dim(format!(
            "norm weight has {} entries, last extent is {d}",
            weight.numel()
        )));
    }
    let mut out = vec![0.0f32; x.data.len()];
    for (row, o) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        let r = kernels::inv_rms(row, RMS_NORM_EPS);
        for ((o, &v), &w) in o.iter_mut().zip(row).zip(&weight.data) {
            *o = w * v * r;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn identity_times_x_is_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let y = matmul(&Tensor::identity(3), &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_mask_forces_one_hot() {
        let x = Tensor::from_rows(&[&[2.5, 7.0]]).unwrap();
        let m = Tensor::from_rows(&[&[0.0, f32::NEG_INFINITY]]).unwrap();
        let y = softmax_rows(&x, Some(&m)).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[&[0.0, 0.0], &[f32::NEG_INFINITY, f32::NEG_INFINITY]]).unwrap();
        assert!(matches!(
            softmax_rows(&x, Some(&m)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[4, 4], 3.0, &mut rng);
        let y = softmax_rows(&x, None).unwrap();
        for r in 0..4 {
            let row = &x.data()[r * 4..r * 4 + 4];
            let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            let mut total = 0.0f64;
            for c in 0..4 {
                let naive = (row[c] as f64).exp() / z;
                assert!((y.data()[r * 4 + c] as f64 - naive).abs() < 1e-6);
                total += y.data()[r * 4 + c] as f64;
            }
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_zero_and_unit_inputs() {
        let w = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let z = rms_norm(&Tensor::zeros(&[1, 4]), &w).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let ones = Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap();
        let y = rms_norm(&ones, &w).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rms_norm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 16], 2.0, &mut rng);
        let w = Tensor::randn(&[16], 1.0, &mut rng);
        let y = rms_norm(&x, &w).unwrap();
        let ms: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 16.0;
        for i in 0..16 {
            let direct = w.data()[i] as f64 * x.data()[i] as f64 / (ms + 1e-5).sqrt();
            assert!((y.data()[i] as f64 - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_weight_length_checked() {
        let w = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        assert!(rms_norm(&Tensor::zeros(&[2, 4]), &w).is_err());
    }

    #[test]
    fn frozen_tensor_ignores_gradients() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());
        let mut t = t.with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
    }
}
