//! The two-branch disentanglement model.
//!
//! A domain-invariant encoder feeds the task classifier and a
//! domain-specific encoder feeds the domain classifier. Both branches see
//! every sample; a supervised contrastive loss over the 3K-way mixed label
//! space is applied separately at each of the three tap depths. Only the
//! invariant branch is used for prediction.

pub mod contrastive;
mod fit;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use contrastive::{contrastive_loss, ContrastiveOutput};
pub use fit::{export_embeddings, fit, render_embeddings};

use crate::data::{mixed_label, DatasetMeta, Domain, FeatureKind, LabeledDataset};
use crate::error::{shape_err, Error, Result};
use crate::nn::{softmax_xent, GradObjective, Mode, Module, Param, Real, Tensor};
use crate::tempcnn::{batch_tensor, eval_forward, ArchConfig, Classifier, Encoder, EncoderCache, Predictor};
use crate::train::LossBreakdown;

pub const N_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RefedModel<F> {
    pub g_inv: Encoder<F>,
    pub g_spe: Encoder<F>,
    pub f_task: Classifier<F>,
    pub f_dom: Classifier<F>,
    pub tau: f64,
    pub normalize: bool,
    n_classes: usize,
}

/// A training batch: inputs `[B, T, C]`, class labels and domain labels.
#[derive(Debug, Clone)]
pub struct RefedBatch<F> {
    pub x: Tensor<F>,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl<F: Real> RefedBatch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples of `dataset` at `indices`, with domain labels from the samples' tags.
    pub fn from_dataset(dataset: &LabeledDataset, indices: &[usize]) -> Self {
        Self {
            x: batch_tensor(dataset, indices),
            labels: indices.iter().map(|&i| dataset.labels()[i] as usize).collect(),
            domains: indices.iter().map(|&i| dataset.domains()[i]).collect(),
        }
    }

    /// Concatenates a source batch and a target batch, labelling domains by
    /// origin rather than by sample tag.
    pub fn from_parts(source: &LabeledDataset, target: &LabeledDataset) -> Result<Self> {
        crate::data::check_compatible(&source.meta(), &target.meta())?;
        let both = source.concat(target)?;
        let idx: Vec<usize> = (0..both.len()).collect();
        let mut batch = Self::from_dataset(&both, &idx);
        for (i, d) in batch.domains.iter_mut().enumerate() {
            *d = if i < source.len() {
                Domain::Source
            } else {
                Domain::Target
            };
        }
        Ok(batch)
    }
}

/// Activations of both branches for one batch.
struct BranchPass<F> {
    taps: [Tensor<F>; N_LEVELS],
    logits: Tensor<F>,
    enc_cache: EncoderCache<F>,
    cls_cache: crate::tempcnn::ClassifierCache<F>,
}

impl<F: Real> RefedModel<F> {
    pub fn new<R: Rng + ?Sized>(
        arch: ArchConfig,
        n_classes: usize,
        tau: f64,
        normalize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let g_inv = Encoder::new(arch, rng)?;
        let g_spe = Encoder::new(arch, rng)?;
        let f_task = Classifier::new(arch.feature_dim(), n_classes, arch.dropout, rng)?;
        let f_dom = Classifier::new(arch.feature_dim(), 2, arch.dropout, rng)?;
        Ok(Self {
            g_inv,
            g_spe,
            f_task,
            f_dom,
            tau,
            normalize,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn arch(&self) -> &ArchConfig {
        self.g_inv.arch()
    }

    fn check_batch(&self, batch: &RefedBatch<F>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if batch.domains.len() != batch.len() || batch.x.rows() != batch.len() {
            return Err(shape_err("batch inputs, labels and domains differ in length"));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::OutOfRange(format!("label {bad} >= K = {}", self.n_classes)));
        }
        Ok(())
    }

    fn run_branch<R: Rng + ?Sized>(
        encoder: &mut Encoder<F>,
        head: &mut Classifier<F>,
        x: &Tensor<F>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<BranchPass<F>> {
        let (enc, enc_cache) = encoder.forward(x, mode, rng)?;
        let (z2, logits, cls_cache) = head.forward(&enc.z1, mode, rng)?;
        Ok(BranchPass {
            taps: [enc.z0, enc.z1, z2],
            logits,
            enc_cache,
            cls_cache,
        })
    }

    /// Mean cross-entropy of the domain classifier on the specific branch.
    pub fn loss_domain<R: Rng + ?Sized>(&mut self, batch: &RefedBatch<F>, mode: Mode, rng: &mut R) -> Result<f64> {
        self.check_batch(batch)?;
        let pass = Self::run_branch(&mut self.g_spe, &mut self.f_dom, &batch.x, mode, rng)?;
        let tags: Vec<usize> = batch.domains.iter().map(|d| d.tag() as usize).collect();
        Ok(softmax_xent(&pass.logits.data, 2, &tags)?.0.as_f64())
    }

    /// Mean cross-entropy of the task classifier on the invariant branch,
    /// over samples of both domains.
    pub fn loss_task<R: Rng + ?Sized>(&mut self, batch: &RefedBatch<F>, mode: Mode, rng: &mut R) -> Result<f64> {
        self.check_batch(batch)?;
        let pass = Self::run_branch(&mut self.g_inv, &mut self.f_task, &batch.x, mode, rng)?;
        Ok(softmax_xent(&pass.logits.data, self.n_classes, &batch.labels)?
            .0
            .as_f64())
    }

    /// Mixed labels of the augmented batch: the invariant copies first, then
    /// the specific copies.
    pub fn mixed_labels(&self, batch: &RefedBatch<F>) -> Result<Vec<usize>> {
        let k = self.n_classes;
        let mut out = Vec::with_capacity(2 * batch.len());
        for (&c, &d) in batch.labels.iter().zip(&batch.domains) {
            out.push(mixed_label(c, k, FeatureKind::Invariant, d)?.index());
        }
        for (&c, &d) in batch.labels.iter().zip(&batch.domains) {
            out.push(mixed_label(c, k, FeatureKind::Specific, d)?.index());
        }
        Ok(out)
    }

    /// All loss components for one batch. With `with_grad`, parameter
    /// gradients are zeroed and then filled with the gradient of the total.
    pub fn forward_losses<R: Rng + ?Sized>(
        &mut self,
        batch: &RefedBatch<F>,
        mode: Mode,
        rng: &mut R,
        with_grad: bool,
    ) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let b = batch.len();
        let inv = Self::run_branch(&mut self.g_inv, &mut self.f_task, &batch.x, mode, rng)?;
        let spe = Self::run_branch(&mut self.g_spe, &mut self.f_dom, &batch.x, mode, rng)?;

        let (l_cl, d_task) = softmax_xent(&inv.logits.data, self.n_classes, &batch.labels)?;
        let tags: Vec<usize> = batch.domains.iter().map(|d| d.tag() as usize).collect();
        let (l_dom, d_dom) = softmax_xent(&spe.logits.data, 2, &tags)?;

        let mixed = self.mixed_labels(batch)?;
        let tau = F::lit(self.tau);
        let mut l_con = [0.0; N_LEVELS];
        let mut d_inv: Vec<Vec<F>> = Vec::with_capacity(N_LEVELS);
        let mut d_spe: Vec<Vec<F>> = Vec::with_capacity(N_LEVELS);
        for (level_loss, (zi, zs)) in l_con.iter_mut().zip(inv.taps.iter().zip(&spe.taps)) {
            let dim = zi.row_len();
            if zs.row_len() != dim {
                return Err(shape_err("branch taps differ in width"));
            }
            let mut stacked = Vec::with_capacity(2 * b * dim);
            stacked.extend_from_slice(&zi.data);
            stacked.extend_from_slice(&zs.data);
            let out = contrastive_loss(&stacked, 2 * b, dim, &mixed, tau, self.normalize)?;
            *level_loss = out.loss.as_f64();
            let (gi, gs) = out.grad.split_at(b * dim);
            d_inv.push(gi.to_vec());
            d_spe.push(gs.to_vec());
        }
        let losses = LossBreakdown::from_components(l_cl.as_f64(), l_dom.as_f64(), l_con);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("loss evaluation".into()));
        }

        if with_grad {
            self.zero_grad();
            let dz1 = self.f_task.backward(&inv.cls_cache, Some(&d_inv[2]), &d_task);
            let dz1: Vec<F> = dz1.iter().zip(&d_inv[1]).map(|(&a, &c)| a + c).collect();
            self.g_inv.backward(&inv.enc_cache, Some(&d_inv[0]), &dz1);

            let dz1 = self.f_dom.backward(&spe.cls_cache, Some(&d_spe[2]), &d_dom);
            let dz1: Vec<F> = dz1.iter().zip(&d_spe[1]).map(|(&a, &c)| a + c).collect();
            self.g_spe.backward(&spe.enc_cache, Some(&d_spe[0]), &dz1);
        }
        Ok(losses)
    }

    /// Invariant-branch taps at `level` in eval mode, `[B, dim]`.
    pub fn invariant_features(&self, x: &Tensor<F>, level: usize) -> Result<Tensor<F>> {
        self.branch_features(x, level, FeatureKind::Invariant)
    }

    pub fn branch_features(&self, x: &Tensor<F>, level: usize, kind: FeatureKind) -> Result<Tensor<F>> {
        let (enc, head) = match kind {
            FeatureKind::Invariant => (&self.g_inv, &self.f_task),
            FeatureKind::Specific => (&self.g_spe, &self.f_dom),
        };
        let (taps, z2, _) = eval_forward(enc, head, x)?;
        match level {
            0 => Ok(taps.z0),
            1 => Ok(taps.z1),
            2 => Ok(z2),
            _ => Err(Error::OutOfRange(format!("supervision level {level} not in 0..=2"))),
        }
    }
}

impl<F: Real> Module<F> for RefedModel<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        use crate::nn::join;
        self.g_inv.visit_params(&join(prefix, "g_inv"), f);
        self.g_spe.visit_params(&join(prefix, "g_spe"), f);
        self.f_task.visit_params(&join(prefix, "f"), f);
        self.f_dom.visit_params(&join(prefix, "f_dom"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        use crate::nn::join;
        self.g_inv.visit_params_mut(&join(prefix, "g_inv"), f);
        self.g_spe.visit_params_mut(&join(prefix, "g_spe"), f);
        self.f_task.visit_params_mut(&join(prefix, "f"), f);
        self.f_dom.visit_params_mut(&join(prefix, "f_dom"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[F])) {
        use crate::nn::join;
        self.g_inv.visit_buffers(&join(prefix, "g_inv"), f);
        self.g_spe.visit_buffers(&join(prefix, "g_spe"), f);
        self.f_task.visit_buffers(&join(prefix, "f"), f);
        self.f_dom.visit_buffers(&join(prefix, "f_dom"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [F])) {
        use crate::nn::join;
        self.g_inv.visit_buffers_mut(&join(prefix, "g_inv"), f);
        self.g_spe.visit_buffers_mut(&join(prefix, "g_spe"), f);
        self.f_task.visit_buffers_mut(&join(prefix, "f"), f);
        self.f_dom.visit_buffers_mut(&join(prefix, "f_dom"), f);
    }
}

/// Prediction uses the invariant encoder and the task classifier only.
impl Predictor for RefedModel<f32> {
    fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            t_len: self.arch().t_len,
            n_bands: self.arch().n_bands,
            n_classes: self.n_classes,
        }
    }

    fn eval_logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(eval_forward(&self.g_inv, &self.f_task, x)?.2)
    }
}

/// The full training loss on a fixed batch, as a function of the model's
/// `f64` parameters. Dropout masks are frozen by reseeding their generator
/// on every evaluation.
pub struct RefedObjective {
    pub model: RefedModel<f64>,
    pub batch: RefedBatch<f64>,
    pub dropout_seed: u64,
}

impl GradObjective for RefedObjective {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        Ok(self
            .model
            .forward_losses(&self.batch, Mode::Train, &mut rng, with_grad)?
            .total)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        self.model.visit_params_mut("", f);
    }

    fn evaluate_terms(&mut self) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let losses = self.model.forward_losses(&self.batch, Mode::Train, &mut rng, false)?;
        Ok(losses.components().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn arch(t: usize, c: usize) -> ArchConfig {
        ArchConfig {
            t_len: t,
            n_bands: c,
            dropout: 0.5,
            pooling: false,
        }
    }

    fn toy_batch(rng: &mut ChaCha8Rng, b: usize, t: usize, c: usize, k: usize) -> RefedBatch<f64> {
        RefedBatch {
            x: Tensor::from_vec(&[b, t, c], (0..b * t * c).map(|_| rng.random_range(0.0..1.0)).collect()),
            labels: (0..b).map(|i| i % k).collect(),
            domains: (0..b)
                .map(|i| if i % 2 == 0 { Domain::Source } else { Domain::Target })
                .collect(),
        }
    }

    #[test]
    fn total_equals_component_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = RefedModel::<f64>::new(arch(6, 2), 3, 0.07, true, &mut rng).unwrap();
        let batch = toy_batch(&mut rng, 8, 6, 2, 3);
        let l = model.forward_losses(&batch, Mode::Train, &mut rng, false).unwrap();
        let sum = l.l_cl + l.l_dom + l.l_con_0 + l.l_con_1 + l.l_con_2;
        assert_eq!(l.total, sum);
        assert!(l.components().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn permuting_batch_keeps_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = RefedModel::<f64>::new(arch(6, 2), 3, 0.07, true, &mut rng).unwrap();
        let batch = toy_batch(&mut rng, 8, 6, 2, 3);
        let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let w = 12;
        let permuted = RefedBatch {
            x: Tensor::from_vec(
                &[8, 6, 2],
                perm.iter()
                    .flat_map(|&i| batch.x.data[i * w..(i + 1) * w].to_vec())
                    .collect(),
            ),
            labels: perm.iter().map(|&i| batch.labels[i]).collect(),
            domains: perm.iter().map(|&i| batch.domains[i]).collect(),
        };
        // eval mode: no dropout draws tied to sample positions
        let a = model.forward_losses(&batch, Mode::Eval, &mut rng, false).unwrap();
        let b = model.forward_losses(&permuted, Mode::Eval, &mut rng, false).unwrap();
        for (x, y) in a.components().iter().zip(b.components()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_heads_give_log_k_and_log_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = RefedModel::<f64>::new(arch(6, 2), 8, 0.07, true, &mut rng).unwrap();
        for head in [&mut model.f_task, &mut model.f_dom] {
            head.visit_params_mut("", &mut |name, p| {
                if name.starts_with("output") {
                    p.value.data.iter_mut().for_each(|v| *v = 0.0);
                }
            });
        }
        let batch = toy_batch(&mut rng, 8, 6, 2, 8);
        let ld = model.loss_domain(&batch, Mode::Eval, &mut rng).unwrap();
        let lt = model.loss_task(&batch, Mode::Eval, &mut rng).unwrap();
        assert!((ld - 2f64.ln()).abs() < 1e-12);
        assert!((lt - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_domain_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = RefedModel::<f64>::new(arch(6, 2), 3, 0.07, true, &mut rng).unwrap();
        let batch = RefedBatch {
            domains: vec![Domain::Target; 4],
            ..toy_batch(&mut rng, 4, 6, 2, 3)
        };
        model.f_dom.visit_params_mut("", &mut |name, p| {
            if name == "output.weight" {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
            if name == "output.bias" {
                p.value.data = vec![-1000.0, 1000.0];
            }
        });
        assert!(model.loss_domain(&batch, Mode::Eval, &mut rng).unwrap() <= 1e-6);
    }

    #[test]
    fn errors_on_bad_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = RefedModel::<f64>::new(arch(6, 2), 3, 0.07, true, &mut rng).unwrap();
        let mut batch = toy_batch(&mut rng, 4, 6, 2, 3);
        batch.labels[0] = 3;
        assert!(model.loss_task(&batch, Mode::Eval, &mut rng).is_err());
        let empty = RefedBatch::<f64> {
            x: Tensor::zeros(&[0, 6, 2]),
            labels: vec![],
            domains: vec![],
        };
        assert!(model.loss_domain(&empty, Mode::Eval, &mut rng).is_err());
        assert!(RefedModel::<f64>::new(arch(6, 2), 3, 0.0, true, &mut rng).is_err());
    }

    #[test]
    fn mixed_labels_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = RefedModel::<f64>::new(arch(6, 2), 3, 0.07, true, &mut rng).unwrap();
        let batch = toy_batch(&mut rng, 4, 6, 2, 3);
        // labels 0,1,2,0 ; domains S,T,S,T
        assert_eq!(model.mixed_labels(&batch).unwrap(), vec![0, 1, 2, 0, 3, 7, 5, 6]);
    }

    #[test]
    fn full_loss_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = RefedModel::<f64>::new(arch(6, 2), 3, 0.07, true, &mut rng).unwrap();
        let batch = toy_batch(&mut rng, 8, 6, 2, 3);
        let mut obj = RefedObjective {
            model,
            batch,
            dropout_seed: 9,
        };
        let report = grad_check(&mut obj, 5e-6, 1e-4, 30, 1).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
