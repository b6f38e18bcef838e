//! Linear softmax-regression probe for measuring what a feature space
//! encodes, e.g. how well domain membership can be read off it.

use crate::error::{shape_err, Error, Result};
use crate::nn::{gemm, softmax_rows, softmax_xent};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.05,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone)]
pub struct Probe {
    dim: usize,
    n_classes: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Probe {
    /// Full-batch Adam on the mean cross-entropy plus an L2 penalty.
    pub fn fit(x: &[f64], dim: usize, labels: &[usize], n_classes: usize, cfg: ProbeConfig) -> Result<Probe> {
        let n = labels.len();
        if n == 0 || dim == 0 {
            return Err(Error::InvalidInput("probe needs samples and features".into()));
        }
        if x.len() != n * dim {
            return Err(shape_err(format!("probe got {} values for {n} x {dim}", x.len())));
        }
        let mut mean = vec![0.0; dim];
        for row in x.chunks(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; dim];
        for row in x.chunks(dim) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut probe = Probe {
            dim,
            n_classes,
            mean,
            inv_std,
            weight: vec![0.0; dim * n_classes],
            bias: vec![0.0; n_classes],
        };
        let xs = probe.standardize(x);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut m = vec![0.0; dim * n_classes + n_classes];
        let mut v = m.clone();
        for step in 1..=cfg.iterations {
            let logits = probe.logits_std(&xs, n);
            let (_, dlogits) = softmax_xent(&logits, n_classes, labels)?;
            let mut gw = vec![0.0; dim * n_classes];
            gemm(dim, n, n_classes, &xs, true, &dlogits, false, 0.0, &mut gw);
            for (g, &w) in gw.iter_mut().zip(&probe.weight) {
                *g += cfg.l2 * w;
            }
            let mut gb = vec![0.0; n_classes];
            for row in dlogits.chunks(n_classes) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
            let params = probe.weight.iter_mut().chain(probe.bias.iter_mut());
            for (((p, g), mi), vi) in params.zip(gw.iter().chain(&gb)).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *p -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for row in out.chunks_mut(self.dim) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }

    fn logits_std(&self, xs: &[f64], n: usize) -> Vec<f64> {
        let mut logits = Vec::with_capacity(n * self.n_classes);
        for _ in 0..n {
            logits.extend_from_slice(&self.bias);
        }
        gemm(
            n,
            self.dim,
            self.n_classes,
            xs,
            false,
            &self.weight,
            false,
            1.0,
            &mut logits,
        );
        logits
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !x.len().is_multiple_of(self.dim) {
            return Err(shape_err(format!("probe rows must have {} values", self.dim)));
        }
        let n = x.len() / self.dim;
        Ok(softmax_rows(&self.logits_std(&self.standardize(x), n), self.n_classes))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok(p.chunks(self.n_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect())
    }

    /// Share of correct predictions, in percent.
    pub fn accuracy(&self, x: &[f64], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() || labels.is_empty() {
            return Err(shape_err("probe accuracy needs one label per row"));
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(100.0 * hits as f64 / labels.len() as f64)
    }
}

/// Fits on the `train` rows and scores on the `test` rows.
pub fn probe_accuracy(
    train: (&[f64], &[usize]),
    test: (&[f64], &[usize]),
    dim: usize,
    n_classes: usize,
    cfg: ProbeConfig,
) -> Result<f64> {
    Probe::fit(train.0, dim, train.1, n_classes, cfg)?.accuracy(test.0, test.1)
}
