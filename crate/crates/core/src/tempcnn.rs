//! TempCNN backbone: a three-block temporal convolutional encoder and a
//! one-hidden-layer classifier head, with feature taps at the three
//! supervision depths.
//!
//! Taps:
//! * `z0`: flattened output of the second conv block,
//! * `z1`: encoder output (flattened third block, or its time average when
//!   pooling is enabled),
//! * `z2`: post-ReLU activation of the classifier's hidden layer.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, LabeledDataset};
use crate::error::{shape_err, Result};
use crate::nn::layers::{BatchNormCache, Conv1dCache};
use crate::nn::{
    join, relu_backward, relu_forward, softmax_rows, softmax_xent, BatchNorm1d, Conv1d, Dropout, Linear, Mode, Module,
    Param, Real, Tensor,
};

pub const CONV_CHANNELS: usize = 64;
pub const CONV_BLOCKS: usize = 3;
pub const KERNEL_SIZE: usize = 5;
pub const HIDDEN_UNITS: usize = 256;
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub t_len: usize,
    pub n_bands: usize,
    pub dropout: f64,
    /// Global average pooling over time instead of flattening the encoder output.
    pub pooling: bool,
}

impl ArchConfig {
    pub fn new(meta: DatasetMeta) -> Self {
        Self {
            t_len: meta.t_len,
            n_bands: meta.n_bands,
            dropout: DEFAULT_DROPOUT,
            pooling: false,
        }
    }

    /// Width of the encoder output `z1`.
    pub fn feature_dim(&self) -> usize {
        if self.pooling {
            CONV_CHANNELS
        } else {
            CONV_CHANNELS * self.t_len
        }
    }

    /// Width of the tap at supervision depth `level`.
    pub fn tap_dim(&self, level: usize) -> usize {
        match level {
            0 => CONV_CHANNELS * self.t_len,
            1 => self.feature_dim(),
            _ => HIDDEN_UNITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock<F> {
    conv: Conv1d<F>,
    bn: BatchNorm1d<F>,
}

struct BlockCache<F> {
    conv: Conv1dCache<F>,
    bn: BatchNormCache<F>,
    activated: Vec<F>,
    mask: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    blocks: Vec<ConvBlock<F>>,
    dropout: Dropout,
    arch: ArchConfig,
}

pub struct EncoderCache<F> {
    blocks: Vec<BlockCache<F>>,
    batch: usize,
}

/// Encoder taps for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub z0: Tensor<F>,
    pub z1: Tensor<F>,
}

impl<F: Real> Encoder<F> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(CONV_BLOCKS);
        for i in 0..CONV_BLOCKS {
            let cin = if i == 0 { arch.n_bands } else { CONV_CHANNELS };
            blocks.push(ConvBlock {
                conv: Conv1d::new(cin, CONV_CHANNELS, KERNEL_SIZE, rng),
                bn: BatchNorm1d::new(CONV_CHANNELS),
            });
        }
        Ok(Self {
            blocks,
            dropout: Dropout::new(arch.dropout)?,
            arch,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// `x` is `[B, T, C]`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<F>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(EncoderOutput<F>, EncoderCache<F>)> {
        if x.shape != [x.shape[0], self.arch.t_len, self.arch.n_bands] {
            return Err(shape_err(format!(
                "encoder expects [B, {}, {}], got {:?}",
                self.arch.t_len, self.arch.n_bands, x.shape
            )));
        }
        let batch = x.shape[0];
        let mut caches = Vec::with_capacity(CONV_BLOCKS);
        let mut h = x.clone();
        let mut z0 = None;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            // the conv bias is folded into batch norm, where it cancels
            // exactly in train mode instead of up to rounding
            let (conv_out, conv_cache) = block.conv.forward_unbiased(&h)?;
            let (mut y, bn_cache) = block.bn.forward_shifted(&conv_out, &block.conv.bias.value.data, mode)?;
            relu_forward(&mut y.data);
            let activated = y.data.clone();
            let mask = self.dropout.forward(&mut y.data, mode, rng);
            caches.push(BlockCache {
                conv: conv_cache,
                bn: bn_cache,
                activated,
                mask,
            });
            if i == 1 {
                z0 = Some(y.clone());
            }
            h = y;
        }
        let z0 = z0
            .expect("three blocks")
            .reshape(&[batch, CONV_CHANNELS * self.arch.t_len]);
        let z1 = if self.arch.pooling {
            let t = self.arch.t_len;
            let tf = F::from_usize(t).unwrap();
            let mut pooled = vec![F::zero(); batch * CONV_CHANNELS];
            for b in 0..batch {
                for ti in 0..t {
                    let row = &h.data[(b * t + ti) * CONV_CHANNELS..(b * t + ti + 1) * CONV_CHANNELS];
                    for (p, &v) in pooled[b * CONV_CHANNELS..(b + 1) * CONV_CHANNELS].iter_mut().zip(row) {
                        *p += v / tf;
                    }
                }
            }
            Tensor::from_vec(&[batch, CONV_CHANNELS], pooled)
        } else {
            let w = h.row_len();
            h.reshape(&[batch, w])
        };
        Ok((EncoderOutput { z0, z1 }, EncoderCache { blocks: caches, batch }))
    }

    /// Accumulates parameter gradients given gradients at the taps.
    pub fn backward(&mut self, cache: &EncoderCache<F>, dz0: Option<&[F]>, dz1: &[F]) {
        let t = self.arch.t_len;
        let batch = cache.batch;
        let mut grad = if self.arch.pooling {
            let tf = F::from_usize(t).unwrap();
            let mut g = vec![F::zero(); batch * t * CONV_CHANNELS];
            for b in 0..batch {
                let src = &dz1[b * CONV_CHANNELS..(b + 1) * CONV_CHANNELS];
                for ti in 0..t {
                    for (gj, &s) in g[(b * t + ti) * CONV_CHANNELS..(b * t + ti + 1) * CONV_CHANNELS]
                        .iter_mut()
                        .zip(src)
                    {
                        *gj = s / tf;
                    }
                }
            }
            g
        } else {
            dz1.to_vec()
        };
        for i in (0..CONV_BLOCKS).rev() {
            if i == 1 {
                if let Some(d0) = dz0 {
                    for (g, &d) in grad.iter_mut().zip(d0) {
                        *g += d;
                    }
                }
            }
            let block = &mut self.blocks[i];
            let bc = &cache.blocks[i];
            Dropout::backward(&bc.mask, &mut grad);
            relu_backward(&bc.activated, &mut grad);
            let dconv = block.bn.backward(&bc.bn, &grad);
            block
                .bn
                .accumulate_shift_grad(&bc.bn, &dconv, &mut block.conv.bias.grad);
            match block.conv.backward_unbiased(&bc.conv, &dconv, i > 0) {
                Some(dx) => grad = dx.data,
                None => break,
            }
        }
    }
}

impl<F: Real> Module<F> for Encoder<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit_params(&join(prefix, &format!("block{i}.conv")), f);
            b.bn.visit_params(&join(prefix, &format!("block{i}.bn")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params_mut(&join(prefix, &format!("block{i}.conv")), f);
            b.bn.visit_params_mut(&join(prefix, &format!("block{i}.bn")), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[F])) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.bn.visit_buffers(&join(prefix, &format!("block{i}.bn")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [F])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.bn.visit_buffers_mut(&join(prefix, &format!("block{i}.bn")), f);
        }
    }
}

/// Hidden fully connected layer with batch norm, ReLU and dropout, then a
/// linear output layer. Softmax is applied by the loss and by prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F> {
    hidden: Linear<F>,
    bn: BatchNorm1d<F>,
    dropout: Dropout,
    output: Linear<F>,
}

pub struct ClassifierCache<F> {
    input: Tensor<F>,
    bn: BatchNormCache<F>,
    activated: Vec<F>,
    mask: Vec<F>,
    dropped: Tensor<F>,
}

impl<F: Real> Classifier<F> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, n_outputs: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(input_dim, HIDDEN_UNITS, rng),
            bn: BatchNorm1d::new(HIDDEN_UNITS),
            dropout: Dropout::new(dropout)?,
            output: Linear::new(HIDDEN_UNITS, n_outputs, rng),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn n_outputs(&self) -> usize {
        self.output.outputs()
    }

    /// Returns `(z2, logits, cache)`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        z1: &Tensor<F>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<F>, Tensor<F>, ClassifierCache<F>)> {
        let h = self.hidden.forward_unbiased(z1)?;
        let (mut a, bn_cache) = self.bn.forward_shifted(&h, &self.hidden.bias.value.data, mode)?;
        relu_forward(&mut a.data);
        let z2 = a.clone();
        let mask = self.dropout.forward(&mut a.data, mode, rng);
        let logits = self.output.forward(&a)?;
        Ok((
            z2.clone(),
            logits,
            ClassifierCache {
                input: z1.clone(),
                bn: bn_cache,
                activated: z2.data,
                mask,
                dropped: a,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient at `z1`.
    pub fn backward(&mut self, cache: &ClassifierCache<F>, dz2: Option<&[F]>, dlogits: &[F]) -> Vec<F> {
        let mut g = self
            .output
            .backward(&cache.dropped, dlogits, true)
            .expect("input grad requested");
        Dropout::backward(&cache.mask, &mut g);
        if let Some(d2) = dz2 {
            for (gj, &d) in g.iter_mut().zip(d2) {
                *gj += d;
            }
        }
        relu_backward(&cache.activated, &mut g);
        let dh = self.bn.backward(&cache.bn, &g);
        self.bn
            .accumulate_shift_grad(&cache.bn, &dh, &mut self.hidden.bias.grad);
        self.hidden
            .backward_unbiased(&cache.input, &dh, true)
            .expect("input grad requested")
    }
}

impl<F: Real> Module<F> for Classifier<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
        self.output.visit_params(&join(prefix, "output"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.hidden.visit_params_mut(&join(prefix, "hidden"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[F])) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [F])) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}

/// An encoder with its classifier head: the baseline network, and the
/// inference path of the two-branch model.
#[derive(Debug, Clone, PartialEq)]
pub struct TempCnn<F> {
    pub encoder: Encoder<F>,
    pub classifier: Classifier<F>,
}

impl<F: Real> TempCnn<F> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, n_classes: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(arch, rng)?;
        let classifier = Classifier::new(arch.feature_dim(), n_classes, arch.dropout, rng)?;
        Ok(Self { encoder, classifier })
    }

    pub fn arch(&self) -> &ArchConfig {
        self.encoder.arch()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.n_outputs()
    }

    /// Mean cross-entropy on a batch. With `with_grad`, parameter gradients
    /// are zeroed and then filled.
    pub fn loss<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<F>,
        labels: &[usize],
        mode: Mode,
        rng: &mut R,
        with_grad: bool,
    ) -> Result<f64> {
        let (taps, enc_cache) = self.encoder.forward(x, mode, rng)?;
        let (_, logits, cls_cache) = self.classifier.forward(&taps.z1, mode, rng)?;
        let (loss, dlogits) = softmax_xent(&logits.data, self.n_classes(), labels)?;
        if with_grad {
            self.zero_grad();
            let dz1 = self.classifier.backward(&cls_cache, None, &dlogits);
            self.encoder.backward(&enc_cache, None, &dz1);
        }
        Ok(loss.as_f64())
    }
}

impl<F: Real> Module<F> for TempCnn<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.classifier.visit_params_mut(&join(prefix, "classifier"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[F])) {
        self.encoder.visit_buffers(&join(prefix, "encoder"), f);
        self.classifier.visit_buffers(&join(prefix, "classifier"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [F])) {
        self.encoder.visit_buffers_mut(&join(prefix, "encoder"), f);
        self.classifier.visit_buffers_mut(&join(prefix, "classifier"), f);
    }
}

/// Anything that maps a `[B, T, C]` batch to class logits in eval mode.
pub trait Predictor {
    fn meta(&self) -> DatasetMeta;
    fn eval_logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Eval-mode forward through an encoder and classifier pair. Takes `&self`
/// by working on a scratch copy of the batch-norm state, which eval mode
/// never writes.
pub fn eval_forward<F: Real>(
    encoder: &Encoder<F>,
    classifier: &Classifier<F>,
    x: &Tensor<F>,
) -> Result<(EncoderOutput<F>, Tensor<F>, Tensor<F>)> {
    let mut enc = encoder.clone();
    let mut cls = classifier.clone();
    // eval mode draws nothing from the generator
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (taps, _) = enc.forward(x, Mode::Eval, &mut rng)?;
    let (z2, logits, _) = cls.forward(&taps.z1, Mode::Eval, &mut rng)?;
    Ok((taps, z2, logits))
}

impl Predictor for TempCnn<f32> {
    fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            t_len: self.arch().t_len,
            n_bands: self.arch().n_bands,
            n_classes: self.n_classes(),
        }
    }

    fn eval_logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(eval_forward(&self.encoder, &self.classifier, x)?.2)
    }
}

pub const PREDICT_CHUNK: usize = 1024;

/// Gathers samples into a `[B, T, C]` tensor.
pub fn batch_tensor<F: Real>(dataset: &LabeledDataset, indices: &[usize]) -> Tensor<F> {
    let w = dataset.t_len() * dataset.n_bands();
    let mut data = Vec::with_capacity(indices.len() * w);
    for &i in indices {
        data.extend(dataset.features(i).iter().map(|&v| F::from_f32(v).unwrap()));
    }
    Tensor::from_vec(&[indices.len(), dataset.t_len(), dataset.n_bands()], data)
}

/// Class probabilities `[N, K]` for every sample of `dataset`, in order.
pub fn predict_proba<P: Predictor + ?Sized>(model: &P, dataset: &LabeledDataset) -> Result<Vec<f32>> {
    let meta = model.meta();
    if dataset.t_len() != meta.t_len || dataset.n_bands() != meta.n_bands || dataset.n_classes() != meta.n_classes {
        return Err(shape_err(format!(
            "model expects (T={}, C={}, K={}), dataset has (T={}, C={}, K={})",
            meta.t_len,
            meta.n_bands,
            meta.n_classes,
            dataset.t_len(),
            dataset.n_bands(),
            dataset.n_classes()
        )));
    }
    let mut out = Vec::with_capacity(dataset.len() * meta.n_classes);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let x = batch_tensor::<f32>(dataset, chunk);
        let logits = model.eval_logits(&x)?;
        out.extend(softmax_rows(&logits.data, meta.n_classes));
    }
    Ok(out)
}

pub fn argmax_rows(probs: &[f32], k: usize) -> Vec<usize> {
    probs
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict<P: Predictor + ?Sized>(model: &P, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    let k = model.meta().n_classes;
    Ok(argmax_rows(&predict_proba(model, dataset)?, k))
}
