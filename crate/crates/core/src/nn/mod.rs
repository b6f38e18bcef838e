//! Differentiable building blocks: tensors, layers with explicit
//! forward/backward passes, the softmax cross-entropy, AdamW and a
//! finite-difference gradient checker.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! is verified in `f64`. Activations are row-major; sequence tensors use the
//! `[B, T, C]` layout (channels last), so flattening a `[B, T, C]` tensor to
//! `[B, T*C]` is free.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub use gradcheck::{grad_check, GradCheckReport, GradObjective, ParamCheck};
pub use layers::{BatchNorm1d, Conv1d, Dropout, Linear};
pub use loss::softmax_xent;
pub use optim::{AdamW, AdamWConfig};

/// Floating point type the network can be instantiated with.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `c = a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// The strides and sizes must describe memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `c[m,n] = op(a)[m,k] * op(b)[k,n] + beta * c`, all buffers row-major.
/// With `ta` set, `a` is stored as `[k, m]`; with `tb`, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(m: usize, k: usize, n: usize, a: &[F], ta: bool, b: &[F], tb: bool, beta: F, c: &mut [F]) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: sizes checked above; strides index within the row-major buffers.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// Size of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all but the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub grad: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = vec![F::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect();
        Self::new(Tensor::from_vec(shape, data))
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Anything holding named parameters and non-trainable buffers.
///
/// Visiting order is fixed; optimizers and checkpoints rely on it.
pub trait Module<F: Real> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &[F])) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut [F])) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name));
        names
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Training or inference behaviour of dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu_forward<F: Real>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// In-place ReLU backward given the post-activation values.
pub fn relu_backward<F: Real>(activated: &[F], grad: &mut [F]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Row-wise softmax of `[rows, m]` logits.
pub fn softmax_rows<F: Real>(logits: &[F], m: usize) -> Vec<F> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(m) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn relu_values() {
        let mut x = [-3.0f32, 3.0, 0.0];
        relu_forward(&mut x);
        assert_eq!(x, [0.0, 3.0, 0.0]);
        let mut g = [1.0f32; 3];
        relu_backward(&x, &mut g);
        assert_eq!(g, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, 1000.0, 0.0, -5.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
