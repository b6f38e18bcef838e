//! Finite-difference checks of every differentiable building block and of
//! the full two-branch loss, in `f64`.
//!
//! Layer cases score the layer output against a fixed random projection,
//! `L = sum_i r_i y_i`, so the upstream gradient is `r` and every output
//! coordinate contributes. Inputs are checked alongside parameters wherever
//! the layer propagates a gradient to them. Dropout masks are frozen by
//! reseeding their generator on every evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Domain;
use crate::error::Result;
use crate::nn::{
    grad_check, relu_backward, relu_forward, softmax_xent, BatchNorm1d, Conv1d, Dropout, GradCheckReport,
    GradObjective, Linear, Mode, Module, Param, Tensor,
};
use crate::refed::{contrastive_loss, RefedBatch, RefedModel, RefedObjective};
use crate::tempcnn::{ArchConfig, Classifier, Encoder, TempCnn};

/// Central-difference step. Smaller steps drown small derivatives in
/// rounding noise; larger ones start to straddle ReLU kinks.
pub const GRAD_EPS: f64 = 5e-6;
/// Coordinates checked per parameter tensor.
pub const COORDS_PER_PARAM: usize = 30;
/// Coordinates per parameter tensor for the full two-branch loss. Every
/// evaluation runs both full-width branches, and the layers underneath are
/// already covered densely by the other cases, so a lighter sample keeps
/// twenty seeds within a couple of minutes on one core.
pub const FULL_LOSS_COORDS_PER_PARAM: usize = 12;
/// Name of the full-loss case in the suite.
pub const FULL_LOSS_CASE: &str = "refed_total_loss";

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub case: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn input_param(shape: &[usize], data: Vec<f64>) -> Param<f64> {
    Param::new(Tensor::from_vec(shape, data))
}

struct ConvCase {
    conv: Conv1d<f64>,
    x: Param<f64>,
    r: Vec<f64>,
}

impl GradObjective for ConvCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let (y, cache) = self.conv.forward(&self.x.value)?;
        if with_grad {
            self.conv.zero_grad();
            self.x.grad = self.conv.backward(&cache, &self.r, true).expect("input grad").data;
        }
        Ok(dot(&y.data, &self.r))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        self.conv.visit_params_mut("conv", f);
        f("input".into(), &mut self.x);
    }
}

struct BatchNormCase {
    bn: BatchNorm1d<f64>,
    x: Param<f64>,
    /// Pre-normalization shift; only differentiable in eval mode, where it
    /// does not cancel.
    shift: Option<Param<f64>>,
    mode: Mode,
    r: Vec<f64>,
}

impl GradObjective for BatchNormCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let zeros = vec![0.0; self.bn.channels()];
        let shift = self.shift.as_ref().map_or(&zeros, |s| &s.value.data);
        let (y, cache) = self.bn.forward_shifted(&self.x.value, shift, self.mode)?;
        if with_grad {
            self.bn.zero_grad();
            let dx = self.bn.backward(&cache, &self.r);
            if let Some(s) = self.shift.as_mut() {
                s.grad = vec![0.0; s.value.len()];
                self.bn.accumulate_shift_grad(&cache, &dx, &mut s.grad);
            }
            self.x.grad = dx;
        }
        Ok(dot(&y.data, &self.r))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        self.bn.visit_params_mut("bn", f);
        f("input".into(), &mut self.x);
        if let Some(s) = self.shift.as_mut() {
            f("shift".into(), s);
        }
    }
}

struct LinearCase {
    linear: Linear<f64>,
    x: Param<f64>,
    r: Vec<f64>,
}

impl GradObjective for LinearCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let y = self.linear.forward(&self.x.value)?;
        if with_grad {
            self.linear.zero_grad();
            self.x.grad = self.linear.backward(&self.x.value, &self.r, true).expect("input grad");
        }
        Ok(dot(&y.data, &self.r))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        self.linear.visit_params_mut("linear", f);
        f("input".into(), &mut self.x);
    }
}

/// ReLU followed by frozen dropout.
struct ActivationCase {
    dropout: Dropout,
    x: Param<f64>,
    r: Vec<f64>,
    seed: u64,
}

impl GradObjective for ActivationCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut y = self.x.value.data.clone();
        relu_forward(&mut y);
        let activated = y.clone();
        let mask = self.dropout.forward(&mut y, Mode::Train, &mut rng);
        if with_grad {
            let mut g = self.r.clone();
            Dropout::backward(&mask, &mut g);
            relu_backward(&activated, &mut g);
            self.x.grad = g;
        }
        Ok(dot(&y, &self.r))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        f("input".into(), &mut self.x);
    }
}

struct XentCase {
    logits: Param<f64>,
    labels: Vec<usize>,
    k: usize,
}

impl GradObjective for XentCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let (loss, d) = softmax_xent(&self.logits.value.data, self.k, &self.labels)?;
        if with_grad {
            self.logits.grad = d;
        }
        Ok(loss)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        f("logits".into(), &mut self.logits);
    }
}

struct ContrastiveCase {
    z: Param<f64>,
    labels: Vec<usize>,
    tau: f64,
    normalize: bool,
}

impl GradObjective for ContrastiveCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let (n, dim) = (self.z.value.shape[0], self.z.value.shape[1]);
        let out = contrastive_loss(&self.z.value.data, n, dim, &self.labels, self.tau, self.normalize)?;
        if with_grad {
            self.z.grad = out.grad;
        }
        Ok(out.loss)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        f("embeddings".into(), &mut self.z);
    }
}

/// Both encoder taps projected and summed.
struct EncoderCase {
    encoder: Encoder<f64>,
    x: Tensor<f64>,
    r0: Vec<f64>,
    r1: Vec<f64>,
    seed: u64,
}

impl GradObjective for EncoderCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (taps, cache) = self.encoder.forward(&self.x, Mode::Train, &mut rng)?;
        if with_grad {
            self.encoder.zero_grad();
            self.encoder.backward(&cache, Some(&self.r0), &self.r1);
        }
        Ok(dot(&taps.z0.data, &self.r0) + dot(&taps.z1.data, &self.r1))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        self.encoder.visit_params_mut("encoder", f);
    }

    fn evaluate_terms(&mut self) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (taps, _) = self.encoder.forward(&self.x, Mode::Train, &mut rng)?;
        Ok(vec![dot(&taps.z0.data, &self.r0), dot(&taps.z1.data, &self.r1)])
    }
}

/// Hidden tap and logits projected and summed.
struct ClassifierCase {
    head: Classifier<f64>,
    x: Param<f64>,
    r2: Vec<f64>,
    rl: Vec<f64>,
    seed: u64,
}

impl GradObjective for ClassifierCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (z2, logits, cache) = self.head.forward(&self.x.value, Mode::Train, &mut rng)?;
        if with_grad {
            self.head.zero_grad();
            self.x.grad = self.head.backward(&cache, Some(&self.r2), &self.rl);
        }
        Ok(dot(&z2.data, &self.r2) + dot(&logits.data, &self.rl))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        self.head.visit_params_mut("head", f);
        f("input".into(), &mut self.x);
    }

    fn evaluate_terms(&mut self) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (z2, logits, _) = self.head.forward(&self.x.value, Mode::Train, &mut rng)?;
        Ok(vec![dot(&z2.data, &self.r2), dot(&logits.data, &self.rl)])
    }
}

/// Cross-entropy of the single-branch network.
struct TempCnnCase {
    model: TempCnn<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    seed: u64,
}

impl GradObjective for TempCnnCase {
    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.model.loss(&self.x, &self.labels, Mode::Train, &mut rng, with_grad)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        self.model.visit_params_mut("", f);
    }
}

fn small_arch(t_len: usize, n_bands: usize) -> ArchConfig {
    ArchConfig {
        t_len,
        n_bands,
        dropout: 0.5,
        pooling: false,
    }
}

/// The full-loss fixture: 8 samples, T = 6, C = 2, K = 3, both domains.
pub fn full_loss_objective(seed: u64) -> Result<RefedObjective> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, c, k) = (8, 6, 2, 3);
    let model = RefedModel::<f64>::new(small_arch(t, c), k, 0.07, true, &mut rng)?;
    let batch = RefedBatch {
        x: Tensor::from_vec(&[b, t, c], uniform(&mut rng, b * t * c, 0.0, 1.0)),
        labels: (0..b).map(|i| (i / 2) % k).collect(),
        domains: (0..b)
            .map(|i| if i % 2 == 0 { Domain::Source } else { Domain::Target })
            .collect(),
    };
    Ok(RefedObjective {
        model,
        batch,
        dropout_seed: seed ^ 0x5eed,
    })
}

/// Every case for one seed.
pub fn cases(seed: u64) -> Result<Vec<(String, Box<dyn GradObjective>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, Box<dyn GradObjective>)> = Vec::new();

    let (b, t, cin, cout) = (3, 7, 3, 4);
    let mut conv = Conv1d::<f64>::new(cin, cout, 5, &mut rng);
    conv.bias.value.data = uniform(&mut rng, cout, -0.5, 0.5);
    out.push((
        "conv1d".into(),
        Box::new(ConvCase {
            conv,
            x: input_param(&[b, t, cin], uniform(&mut rng, b * t * cin, -1.0, 1.0)),
            r: uniform(&mut rng, b * t * cout, -1.0, 1.0),
        }),
    ));

    for (name, mode, with_shift) in [
        ("batchnorm_train", Mode::Train, false),
        ("batchnorm_eval", Mode::Eval, true),
    ] {
        let ch = 4;
        let mut bn = BatchNorm1d::<f64>::new(ch);
        bn.gamma.value.data = uniform(&mut rng, ch, 0.5, 1.5);
        bn.beta.value.data = uniform(&mut rng, ch, -0.5, 0.5);
        bn.running_mean = uniform(&mut rng, ch, -0.5, 0.5);
        bn.running_var = uniform(&mut rng, ch, 0.5, 1.5);
        let shift = with_shift.then(|| input_param(&[ch], uniform(&mut rng, ch, -0.5, 0.5)));
        out.push((
            name.into(),
            Box::new(BatchNormCase {
                bn,
                x: input_param(&[b, t, ch], uniform(&mut rng, b * t * ch, -1.0, 1.0)),
                shift,
                mode,
                r: uniform(&mut rng, b * t * ch, -1.0, 1.0),
            }),
        ));
    }

    let (n, din, dout) = (5, 6, 4);
    let mut linear = Linear::<f64>::new(din, dout, &mut rng);
    linear.bias.value.data = uniform(&mut rng, dout, -0.5, 0.5);
    out.push((
        "linear".into(),
        Box::new(LinearCase {
            linear,
            x: input_param(&[n, din], uniform(&mut rng, n * din, -1.0, 1.0)),
            r: uniform(&mut rng, n * dout, -1.0, 1.0),
        }),
    ));

    // inputs kept away from the ReLU kink
    let x: Vec<f64> = (0..24)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    out.push((
        "relu_dropout".into(),
        Box::new(ActivationCase {
            dropout: Dropout::new(0.5)?,
            x: input_param(&[4, 6], x),
            r: uniform(&mut rng, 24, -1.0, 1.0),
            seed: rng.random(),
        }),
    ));

    let k = 4;
    out.push((
        "softmax_xent".into(),
        Box::new(XentCase {
            logits: input_param(&[6, k], uniform(&mut rng, 6 * k, -3.0, 3.0)),
            labels: (0..6).map(|_| rng.random_range(0..k)).collect(),
            k,
        }),
    ));

    for tau in [0.07, 0.5, 1.0] {
        for normalize in [true, false] {
            let (n, dim) = (10, 5);
            // unnormalized logits stay moderate at small temperatures
            let scale = if normalize { 1.0 } else { 0.3 };
            out.push((
                format!("contrastive_tau{tau}_{}", if normalize { "l2" } else { "raw" }),
                Box::new(ContrastiveCase {
                    z: input_param(&[n, dim], uniform(&mut rng, n * dim, -scale, scale)),
                    labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
                    tau,
                    normalize,
                }),
            ));
        }
    }

    let arch = small_arch(6, 2);
    let encoder = Encoder::<f64>::new(arch, &mut rng)?;
    let b = 4;
    out.push((
        "encoder".into(),
        Box::new(EncoderCase {
            encoder,
            x: Tensor::from_vec(&[b, 6, 2], uniform(&mut rng, b * 12, 0.0, 1.0)),
            r0: uniform(&mut rng, b * arch.tap_dim(0), -1.0, 1.0),
            r1: uniform(&mut rng, b * arch.tap_dim(1), -1.0, 1.0),
            seed: rng.random(),
        }),
    ));

    let (n, din, k) = (6, 12, 3);
    let head = Classifier::<f64>::new(din, k, 0.5, &mut rng)?;
    out.push((
        "classifier".into(),
        Box::new(ClassifierCase {
            head,
            x: input_param(&[n, din], uniform(&mut rng, n * din, -1.0, 1.0)),
            r2: uniform(&mut rng, n * crate::tempcnn::HIDDEN_UNITS, -1.0, 1.0),
            rl: uniform(&mut rng, n * k, -1.0, 1.0),
            seed: rng.random(),
        }),
    ));

    let model = TempCnn::<f64>::new(arch, 3, &mut rng)?;
    out.push((
        "tempcnn_xent".into(),
        Box::new(TempCnnCase {
            model,
            x: Tensor::from_vec(&[6, 6, 2], uniform(&mut rng, 72, 0.0, 1.0)),
            labels: (0..6).map(|i| i % 3).collect(),
            seed: rng.random(),
        }),
    ));

    out.push((FULL_LOSS_CASE.into(), Box::new(full_loss_objective(seed)?)));
    Ok(out)
}

/// Runs every case for `seed` and reports the worst relative error.
pub fn run_suite(seed: u64, tol: f64) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    let mut worst: f64 = 0.0;
    for (case, mut obj) in cases(seed)? {
        let coords = if case == FULL_LOSS_CASE {
            FULL_LOSS_COORDS_PER_PARAM
        } else {
            COORDS_PER_PARAM
        };
        let report = grad_check(obj.as_mut(), GRAD_EPS, tol, coords, seed)?;
        worst = worst.max(report.max_rel_err);
        entries.push(SuiteEntry { case, report });
    }
    Ok(SuiteReport {
        seed,
        tol,
        max_rel_err: worst,
        entries,
    })
}
