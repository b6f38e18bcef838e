//! Pieces shared by every training loop: seeded generator streams, epoch
//! batching, validation and the per-epoch log.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_compatible, LabeledDataset, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::{confusion, Evaluation};
use crate::tempcnn::{predict, Predictor};

/// Independent generator streams derived from one seed.
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            init: stream(0),
            shuffle: stream(1),
            dropout: stream(2),
        }
    }
}

/// Shuffled mini-batches covering `n` samples once. A trailing batch with
/// fewer than two samples is dropped because batch norm cannot train on it.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Mean per-batch loss components for one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cl: f64,
    pub l_dom: f64,
    pub l_con_0: f64,
    pub l_con_1: f64,
    pub l_con_2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is the component sum, accumulated in a
    /// fixed order.
    pub fn from_components(l_cl: f64, l_dom: f64, l_con: [f64; 3]) -> Self {
        let total = l_cl + l_dom + l_con[0] + l_con[1] + l_con[2];
        Self {
            l_cl,
            l_dom,
            l_con_0: l_con[0],
            l_con_1: l_con[1],
            l_con_2: l_con[2],
            total,
        }
    }

    pub fn components(&self) -> [f64; 5] {
        [self.l_cl, self.l_dom, self.l_con_0, self.l_con_1, self.l_con_2]
    }

    pub(crate) fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut sums = [0.0; 5];
        for it in items {
            for (s, v) in sums.iter_mut().zip(it.components()) {
                *s += v;
            }
        }
        LossBreakdown::from_components(sums[0] / n, sums[1] / n, [sums[2] / n, sums[3] / n, sums[4] / n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub val_weighted_f1: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    /// Validation scores of the freshly initialized model.
    pub initial_val_weighted_f1: f64,
    pub best_epoch: usize,
    pub best_val_weighted_f1: f64,
}

impl TrainingLog {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Tracks the best validation score; ties go to the later epoch.
pub(crate) struct BestTracker<M> {
    pub best: Option<(usize, f64, M)>,
}

impl<M: Clone> BestTracker<M> {
    pub fn new() -> Self {
        Self { best: None }
    }

    pub fn offer(&mut self, epoch: usize, score: f64, model: &M) {
        let better = match &self.best {
            None => true,
            Some((_, s, _)) => score >= *s,
        };
        if better {
            self.best = Some((epoch, score, model.clone()));
        }
    }
}

pub fn evaluate<P: Predictor + ?Sized>(model: &P, dataset: &LabeledDataset) -> Result<Evaluation> {
    let pred = predict(model, dataset)?;
    let reference: Vec<usize> = dataset.labels().iter().map(|&l| l as usize).collect();
    let cm = confusion(&reference, &pred, dataset.n_classes())?;
    Evaluation::from_confusion(&cm)
}

pub(crate) fn require_compatible(sources: &[&dyn SampleSource]) -> Result<()> {
    let first = sources[0].meta();
    for s in &sources[1..] {
        check_compatible(&first, &s.meta())?;
    }
    Ok(())
}

pub(crate) fn require_non_empty(what: &str, src: &dyn SampleSource) -> Result<()> {
    if src.is_empty() {
        return Err(Error::InvalidInput(format!("{what} partition is empty")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_samples_once() {
        let mut rng = RngStreams::new(3).shuffle;
        let b = epoch_batches(11, 4, &mut rng);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        // trailing singleton dropped
        let b = epoch_batches(9, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 8);
    }

    #[test]
    fn streams_differ() {
        use rand::Rng;
        let mut s = RngStreams::new(1);
        let a: u64 = s.init.random();
        let b: u64 = s.shuffle.random();
        assert_ne!(a, b);
        let mut again = RngStreams::new(1);
        assert_eq!(a, again.init.random::<u64>());
    }

    #[test]
    fn total_is_component_sum() {
        let l = LossBreakdown::from_components(0.5, 0.25, [1.0, 2.0, 0.125]);
        assert_eq!(l.total, 3.875);
        let m = LossBreakdown::mean_of(&[l, l]);
        assert_eq!(m, l);
    }

    #[test]
    fn best_tracker_prefers_later_ties() {
        let mut t = BestTracker::new();
        t.offer(1, 50.0, &"a");
        t.offer(2, 50.0, &"b");
        t.offer(3, 40.0, &"c");
        assert_eq!(t.best.unwrap().0, 2);
    }
}
