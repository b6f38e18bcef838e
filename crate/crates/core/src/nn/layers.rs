use rand::Rng;

use super::{gemm, join, Mode, Module, Param, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Stride-1 temporal convolution with zero "same" padding.
///
/// Kernels are stored `[C_out, C_in, k]`; inputs and outputs use the
/// `[B, T, C]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct Conv1dCache<F> {
    cols: Vec<F>,
    batch: usize,
    t_len: usize,
}

impl<F: Real> Conv1d<F> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            weight: Param::glorot(
                &[out_channels, in_channels, kernel],
                in_channels * kernel,
                out_channels * kernel,
                rng,
            ),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn im2col(&self, x: &Tensor<F>) -> Vec<F> {
        let (b, t, c) = (x.shape[0], x.shape[1], x.shape[2]);
        let k = self.kernel;
        let half = k / 2;
        let width = c * k;
        let mut cols = vec![F::zero(); b * t * width];
        for bi in 0..b {
            for ti in 0..t {
                let row = &mut cols[(bi * t + ti) * width..(bi * t + ti + 1) * width];
                for j in 0..k {
                    let src = ti + j;
                    if src < half || src - half >= t {
                        continue;
                    }
                    let xrow = &x.data[(bi * t + src - half) * c..(bi * t + src - half + 1) * c];
                    for (ci, &v) in xrow.iter().enumerate() {
                        row[ci * k + j] = v;
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Conv1dCache<F>)> {
        self.forward_impl(x, true)
    }

    /// Forward pass without the bias, for a conv whose bias is folded into
    /// a following batch norm.
    pub(crate) fn forward_unbiased(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Conv1dCache<F>)> {
        self.forward_impl(x, false)
    }

    fn forward_impl(&self, x: &Tensor<F>, with_bias: bool) -> Result<(Tensor<F>, Conv1dCache<F>)> {
        if x.shape.len() != 3 || x.shape[2] != self.in_channels {
            return Err(shape_err(format!(
                "conv1d expects [B, T, {}], got {:?}",
                self.in_channels, x.shape
            )));
        }
        let (b, t) = (x.shape[0], x.shape[1]);
        let cols = self.im2col(x);
        let rows = b * t;
        let mut out = Vec::with_capacity(rows * self.out_channels);
        if with_bias {
            for _ in 0..rows {
                out.extend_from_slice(&self.bias.value.data);
            }
        } else {
            out.resize(rows * self.out_channels, F::zero());
        }
        gemm(
            rows,
            self.in_channels * self.kernel,
            self.out_channels,
            &cols,
            false,
            &self.weight.value.data,
            true,
            F::one(),
            &mut out,
        );
        Ok((
            Tensor::from_vec(&[b, t, self.out_channels], out),
            Conv1dCache {
                cols,
                batch: b,
                t_len: t,
            },
        ))
    }

    /// Accumulates kernel and bias gradients; returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(&mut self, cache: &Conv1dCache<F>, grad_out: &[F], need_input_grad: bool) -> Option<Tensor<F>> {
        self.backward_impl(cache, grad_out, need_input_grad, true)
    }

    /// Backward pass of [`Conv1d::forward_unbiased`]; leaves the bias
    /// gradient to the caller.
    pub(crate) fn backward_unbiased(
        &mut self,
        cache: &Conv1dCache<F>,
        grad_out: &[F],
        need_input_grad: bool,
    ) -> Option<Tensor<F>> {
        self.backward_impl(cache, grad_out, need_input_grad, false)
    }

    fn backward_impl(
        &mut self,
        cache: &Conv1dCache<F>,
        grad_out: &[F],
        need_input_grad: bool,
        with_bias: bool,
    ) -> Option<Tensor<F>> {
        let rows = cache.batch * cache.t_len;
        let width = self.in_channels * self.kernel;
        assert_eq!(grad_out.len(), rows * self.out_channels);
        gemm(
            self.out_channels,
            rows,
            width,
            grad_out,
            true,
            &cache.cols,
            false,
            F::one(),
            &mut self.weight.grad,
        );
        if with_bias {
            for row in grad_out.chunks(self.out_channels) {
                for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![F::zero(); rows * width];
        gemm(
            rows,
            self.out_channels,
            width,
            grad_out,
            false,
            &self.weight.value.data,
            false,
            F::zero(),
            &mut dcols,
        );
        let (b, t, c, k) = (cache.batch, cache.t_len, self.in_channels, self.kernel);
        let half = k / 2;
        let mut dx = vec![F::zero(); b * t * c];
        for bi in 0..b {
            for ti in 0..t {
                let row = &dcols[(bi * t + ti) * width..(bi * t + ti + 1) * width];
                for j in 0..k {
                    let src = ti + j;
                    if src < half || src - half >= t {
                        continue;
                    }
                    let base = (bi * t + src - half) * c;
                    for ci in 0..c {
                        dx[base + ci] += row[ci * k + j];
                    }
                }
            }
        }
        Some(Tensor::from_vec(&[b, t, c], dx))
    }
}

impl<F: Real> Module<F> for Conv1d<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Batch normalization over the rows of a `[N, C]` view; sequence inputs
/// `[B, T, C]` are normalized over both the batch and time axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    mode: Mode,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<F: Real> BatchNorm1d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::from_vec(&[channels], vec![F::one(); channels])),
            beta: Param::zeros(&[channels]),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: F::lit(BN_MOMENTUM),
            eps: F::lit(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<(Tensor<F>, BatchNormCache<F>)> {
        let zeros = vec![F::zero(); self.channels()];
        self.forward_shifted(x, &zeros, mode)
    }

    /// Normalizes `x + shift`, with `shift` a per-channel offset such as
    /// the bias of the preceding layer. In train mode the shift cancels
    /// exactly against the batch mean, so it is never added to the data;
    /// it only enters the running mean.
    pub fn forward_shifted(
        &mut self,
        x: &Tensor<F>,
        shift: &[F],
        mode: Mode,
    ) -> Result<(Tensor<F>, BatchNormCache<F>)> {
        let c = self.channels();
        assert_eq!(shift.len(), c);
        if *x.shape.last().unwrap_or(&0) != c {
            return Err(shape_err(format!(
                "batchnorm over {c} channels got shape {:?}",
                x.shape
            )));
        }
        let n = x.len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidInput(format!(
                        "batchnorm in train mode needs at least 2 values per channel, got {n}"
                    )));
                }
                let mut mean = vec![F::zero(); c];
                for row in x.data.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let nf = F::from_usize(n).unwrap();
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![F::zero(); c];
                for row in x.data.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                let unbiased = F::from_usize(n - 1).unwrap();
                let mom = self.momentum;
                for j in 0..c {
                    self.running_mean[j] = (F::one() - mom) * self.running_mean[j] + mom * (mean[j] + shift[j]);
                    self.running_var[j] = (F::one() - mom) * self.running_var[j] + mom * var[j] / unbiased;
                    var[j] /= nf;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.iter().zip(shift).map(|(&m, &s)| m - s).collect(),
                self.running_var.clone(),
            ),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = x.data.clone();
        let mut out = x.data.clone();
        for (hrow, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            for j in 0..c {
                let h = (hrow[j] - mean[j]) * inv_std[j];
                hrow[j] = h;
                orow[j] = self.gamma.value.data[j] * h + self.beta.value.data[j];
            }
        }
        Ok((Tensor::from_vec(&x.shape, out), BatchNormCache { xhat, inv_std, mode }))
    }

    /// Adds the gradient with respect to the `shift` of
    /// [`BatchNorm1d::forward_shifted`] into `out`, given the input gradient
    /// returned by [`BatchNorm1d::backward`]. It is exactly zero in train mode.
    pub fn accumulate_shift_grad(&self, cache: &BatchNormCache<F>, dx: &[F], out: &mut [F]) {
        if cache.mode == Mode::Eval {
            for row in dx.chunks(self.channels()) {
                for (o, &d) in out.iter_mut().zip(row) {
                    *o += d;
                }
            }
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache<F>, grad_out: &[F]) -> Vec<F> {
        let c = self.channels();
        let n = grad_out.len() / c;
        let mut sum_dy = vec![F::zero(); c];
        let mut sum_dy_xhat = vec![F::zero(); c];
        for (drow, hrow) in grad_out.chunks(c).zip(cache.xhat.chunks(c)) {
            for j in 0..c {
                sum_dy[j] += drow[j];
                sum_dy_xhat[j] += drow[j] * hrow[j];
            }
        }
        for j in 0..c {
            self.beta.grad[j] += sum_dy[j];
            self.gamma.grad[j] += sum_dy_xhat[j];
        }
        let gamma = &self.gamma.value.data;
        let mut dx = grad_out.to_vec();
        match cache.mode {
            Mode::Train => {
                let nf = F::from_usize(n).unwrap();
                for (drow, hrow) in dx.chunks_mut(c).zip(cache.xhat.chunks(c)) {
                    for j in 0..c {
                        let scale = gamma[j] * cache.inv_std[j] / nf;
                        drow[j] = scale * (nf * drow[j] - sum_dy[j] - hrow[j] * sum_dy_xhat[j]);
                    }
                }
            }
            Mode::Eval => {
                for drow in dx.chunks_mut(c) {
                    for j in 0..c {
                        drow[j] *= gamma[j] * cache.inv_std[j];
                    }
                }
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for BatchNorm1d<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[F])) {
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [F])) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` at train time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Self { rate })
    }

    /// Applies dropout in place and returns the mask (empty when inactive).
    pub fn forward<F: Real, R: Rng + ?Sized>(&self, x: &mut [F], mode: Mode, rng: &mut R) -> Vec<F> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Vec::new();
        }
        let keep = F::lit(1.0 / (1.0 - self.rate));
        let mask: Vec<F> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        mask
    }

    pub fn backward<F: Real>(mask: &[F], grad: &mut [F]) {
        if mask.is_empty() {
            return;
        }
        for (g, &m) in grad.iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

/// Fully connected layer `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::glorot(&[inputs, outputs], inputs, outputs, rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.forward_impl(x, true)
    }

    /// Forward pass without the bias, for a layer whose bias is folded into
    /// a following batch norm.
    pub(crate) fn forward_unbiased(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.forward_impl(x, false)
    }

    fn forward_impl(&self, x: &Tensor<F>, with_bias: bool) -> Result<Tensor<F>> {
        if x.shape.len() < 2 || x.row_len() != self.inputs() {
            return Err(shape_err(format!(
                "linear expects rows of {} values, got shape {:?}",
                self.inputs(),
                x.shape
            )));
        }
        let (rows, out_dim) = (x.rows(), self.outputs());
        let mut out = Vec::with_capacity(rows * out_dim);
        if with_bias {
            for _ in 0..rows {
                out.extend_from_slice(&self.bias.value.data);
            }
        } else {
            out.resize(rows * out_dim, F::zero());
        }
        gemm(
            rows,
            self.inputs(),
            out_dim,
            &x.data,
            false,
            &self.weight.value.data,
            false,
            F::one(),
            &mut out,
        );
        Ok(Tensor::from_vec(&[rows, out_dim], out))
    }

    pub fn backward(&mut self, input: &Tensor<F>, grad_out: &[F], need_input_grad: bool) -> Option<Vec<F>> {
        self.backward_impl(input, grad_out, need_input_grad, true)
    }

    /// Backward pass of [`Linear::forward_unbiased`]; leaves the bias
    /// gradient to the caller.
    pub(crate) fn backward_unbiased(
        &mut self,
        input: &Tensor<F>,
        grad_out: &[F],
        need_input_grad: bool,
    ) -> Option<Vec<F>> {
        self.backward_impl(input, grad_out, need_input_grad, false)
    }

    fn backward_impl(
        &mut self,
        input: &Tensor<F>,
        grad_out: &[F],
        need_input_grad: bool,
        with_bias: bool,
    ) -> Option<Vec<F>> {
        let (rows, in_dim, out_dim) = (input.rows(), self.inputs(), self.outputs());
        assert_eq!(grad_out.len(), rows * out_dim);
        gemm(
            in_dim,
            rows,
            out_dim,
            &input.data,
            true,
            grad_out,
            false,
            F::one(),
            &mut self.weight.grad,
        );
        if with_bias {
            for row in grad_out.chunks(out_dim) {
                for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        need_input_grad.then(|| {
            let mut dx = vec![F::zero(); rows * in_dim];
            gemm(
                rows,
                out_dim,
                in_dim,
                grad_out,
                false,
                &self.weight.value.data,
                true,
                F::zero(),
                &mut dx,
            );
            dx
        })
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Merges every axis after the first: `[B, T, C] -> [B, T*C]`.
pub fn flatten<F: Real>(x: Tensor<F>) -> Tensor<F> {
    let rows = x.rows();
    let w = x.row_len();
    x.reshape(&[rows, w])
}
