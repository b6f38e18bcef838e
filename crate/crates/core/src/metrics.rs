//! Confusion-matrix metrics. Scores are percentages in `[0, 100]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x K` counts, rows are reference classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            n_classes: k,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.n_classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes.max(1)).map(|r| r.to_vec()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|k| self.get(k, k)).sum()
    }

    /// Row sum: number of reference samples of class `k`.
    pub fn support(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(k, j)).sum()
    }

    /// Column sum: number of samples predicted as `k`.
    pub fn predicted(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, k)).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Shape("confusion matrices differ in K".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn non_empty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::InvalidInput("metric of an empty confusion matrix".into())),
            n => Ok(n),
        }
    }

    /// Per-class F1 as a fraction in `[0, 1]`; undefined precision or recall
    /// counts as zero.
    fn f1_fraction(&self, k: usize) -> f64 {
        let tp = self.get(k, k) as f64;
        let support = self.support(k);
        let predicted = self.predicted(k);
        if support == 0 || predicted == 0 || tp == 0.0 {
            return 0.0;
        }
        let precision = tp / predicted as f64;
        let recall = tp / support as f64;
        2.0 * precision * recall / (precision + recall)
    }

    pub fn accuracy(&self) -> Result<f64> {
        let n = self.non_empty()?;
        Ok(100.0 * self.trace() as f64 / n as f64)
    }

    pub fn per_class_f1(&self) -> Result<Vec<f64>> {
        self.non_empty()?;
        Ok((0..self.n_classes).map(|k| 100.0 * self.f1_fraction(k)).collect())
    }

    /// Support-weighted mean of per-class F1 over the reference labels.
    pub fn weighted_f1(&self) -> Result<f64> {
        let n = self.non_empty()? as f64;
        let score: f64 = (0..self.n_classes)
            .map(|k| (self.support(k) as f64 / n) * self.f1_fraction(k))
            .sum();
        Ok(100.0 * score)
    }
}

pub fn confusion(reference: &[usize], predicted: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if reference.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} reference labels vs {} predictions",
            reference.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&r, &p) in reference.iter().zip(predicted) {
        if r >= n_classes || p >= n_classes {
            return Err(Error::OutOfRange(format!(
                "label pair ({r}, {p}) out of range for K = {n_classes}"
            )));
        }
        cm.counts[r * n_classes + p] += 1;
    }
    Ok(cm)
}

pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.weighted_f1()
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.accuracy()
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    cm.per_class_f1()
}

/// Summary of one evaluation, as written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_samples: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion_matrix: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            n_samples: cm.total(),
            accuracy: cm.accuracy()?,
            weighted_f1: cm.weighted_f1()?,
            per_class_f1: cm.per_class_f1()?,
            confusion_matrix: cm.rows(),
        })
    }
}

/// Sample mean and `n - 1` standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn direct_count() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 2]]);
        assert!((cm.weighted_f1().unwrap() - 73.333_333_333).abs() < 1e-6);
        assert_eq!(cm.accuracy().unwrap(), 75.0);
        let f1 = cm.per_class_f1().unwrap();
        assert!((f1[0] - 200.0 / 3.0).abs() < 1e-9);
        assert!((f1[1] - 80.0).abs() < 1e-9);
    }

    #[test]
    fn empty_and_diagonal() {
        let cm = confusion(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.weighted_f1().is_err());
        assert!(cm.accuracy().is_err());
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(cm.weighted_f1().unwrap(), 100.0);
        assert_eq!(cm.accuracy().unwrap(), 100.0);
    }

    #[test]
    fn all_wrong_single_class() {
        let cm = confusion(&[0, 0, 1, 1], &[2, 2, 2, 2], 3).unwrap();
        assert_eq!(cm.weighted_f1().unwrap(), 0.0);
        assert_eq!(cm.per_class_f1().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
    }

    #[test]
    fn mean_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    fn labels(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(move |n| (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)))
    }

    proptest! {
        #[test]
        fn scores_bounded((r, p) in labels(4)) {
            let cm = confusion(&r, &p, 4).unwrap();
            let f1 = cm.weighted_f1().unwrap();
            let acc = cm.accuracy().unwrap();
            prop_assert!((0.0..=100.0).contains(&f1));
            prop_assert!((0.0..=100.0).contains(&acc));
            let diagonal = r == p;
            prop_assert_eq!(diagonal, (f1 - 100.0).abs() < 1e-9 && acc == 100.0);
        }

        #[test]
        fn invariant_under_class_relabelling((r, p) in labels(4), perm in Just([2usize, 0, 3, 1])) {
            let cm = confusion(&r, &p, 4).unwrap();
            let rr: Vec<usize> = r.iter().map(|&v| perm[v]).collect();
            let pp: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
            let cm2 = confusion(&rr, &pp, 4).unwrap();
            prop_assert!((cm.weighted_f1().unwrap() - cm2.weighted_f1().unwrap()).abs() < 1e-9);
            prop_assert_eq!(cm.accuracy().unwrap(), cm2.accuracy().unwrap());
        }

        #[test]
        fn confusion_is_additive((r, p) in labels(3), cut in 0usize..60) {
            let cut = cut.min(r.len());
            let mut a = confusion(&r[..cut], &p[..cut], 3).unwrap();
            let b = confusion(&r[cut..], &p[cut..], 3).unwrap();
            a.add(&b).unwrap();
            prop_assert_eq!(a, confusion(&r, &p, 3).unwrap());
        }
    }
}
