//! Single-branch TempCNN trained under the four comparison data regimens.

use crate::config::{Method, RunConfig};
use crate::data::{LabeledDataset, SampleSource};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Mode};
use crate::preprocess::assign_polygons;
use crate::tempcnn::{batch_tensor, ArchConfig, TempCnn};
use crate::train::{
    epoch_batches, evaluate, require_compatible, require_non_empty, BestTracker, EpochRecord, LossBreakdown,
    RngStreams, TrainingLog,
};

/// Trains a TempCNN under `cfg.mode`, which must be one of the baseline
/// methods. Only the partitions the method needs are read:
///
/// * `OnlySource`: source only; a polygon-aware share
///   `cfg.source_val_fraction` of it selects the epoch, the rest trains.
/// * `OnlyTarget`: target train, selected on target validation.
/// * `SourceTarget`: source plus target train, selected on target validation.
/// * `Finetune`: `pretrain_epochs` on source, then the remaining epochs on
///   target train, selected on target validation during the second phase.
pub fn train_strategy(
    source: &dyn SampleSource,
    target_train: &dyn SampleSource,
    target_val: &dyn SampleSource,
    cfg: &RunConfig,
) -> Result<(TempCnn<f32>, TrainingLog)> {
    cfg.validate()?;
    require_compatible(&[source, target_train, target_val])?;
    let mut rngs = RngStreams::new(cfg.seed);
    let meta = source.meta();
    let mut arch = ArchConfig::new(meta);
    arch.dropout = cfg.dropout;
    arch.pooling = cfg.pooling;
    let model = TempCnn::<f32>::new(arch, meta.n_classes, &mut rngs.init)?;
    let mut run = Run {
        model,
        opt: AdamW::new(cfg.adamw()),
        rngs,
        batch_size: cfg.batch_size(),
        log: TrainingLog::default(),
    };

    match cfg.mode {
        Method::OnlySource => {
            require_non_empty("source", source)?;
            let src = source.read_all();
            let (train, val) = source_holdout(&src, cfg.source_val_fraction, cfg.seed)?;
            run.select(&train, &val, 1, cfg.epochs, "train")
        }
        Method::OnlyTarget => {
            require_non_empty("target training", target_train)?;
            require_non_empty("target validation", target_val)?;
            let (train, val) = (target_train.read_all(), target_val.read_all());
            run.select(&train, &val, 1, cfg.epochs, "train")
        }
        Method::SourceTarget => {
            require_non_empty("source", source)?;
            require_non_empty("target training", target_train)?;
            require_non_empty("target validation", target_val)?;
            let train = source.read_all().concat(&target_train.read_all())?;
            let val = target_val.read_all();
            run.select(&train, &val, 1, cfg.epochs, "train")
        }
        Method::Finetune => {
            require_non_empty("source", source)?;
            require_non_empty("target training", target_train)?;
            require_non_empty("target validation", target_val)?;
            let val = target_val.read_all();
            let pre = cfg.pretrain_epochs();
            run.log.initial_val_weighted_f1 = evaluate(&run.model, &val)?.weighted_f1;
            let src = source.read_all();
            for epoch in 1..=pre {
                run.epoch(&src, &val, epoch, "pretrain")?;
            }
            if cfg.reset_optimizer_between_phases {
                run.opt.reset();
            }
            let tgt = target_train.read_all();
            let initial = run.log.initial_val_weighted_f1;
            let out = run.select(&tgt, &val, pre + 1, cfg.epochs, "finetune");
            out.map(|(m, mut log)| {
                log.initial_val_weighted_f1 = initial;
                (m, log)
            })
        }
        Method::Refed => Err(Error::Config(
            "the two-branch model is trained by refed::fit, not as a baseline".into(),
        )),
    }
}

/// Polygon-aware split of the source into a training share and a held-out
/// share of `fraction`.
pub fn source_holdout(src: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (assignment, _) = assign_polygons(src, &[1.0 - fraction, fraction], seed)?;
    let mut parts = [Vec::new(), Vec::new()];
    for (i, pid) in src.polygon_ids().iter().enumerate() {
        parts[assignment[pid]].push(i);
    }
    if parts[0].is_empty() || parts[1].is_empty() {
        return Err(Error::InvalidInput(
            "source has too few polygons for a held-out validation share".into(),
        ));
    }
    Ok((src.subset(&parts[0]), src.subset(&parts[1])))
}

struct Run {
    model: TempCnn<f32>,
    opt: AdamW<f32>,
    rngs: RngStreams,
    batch_size: usize,
    log: TrainingLog,
}

impl Run {
    fn epoch(&mut self, train: &LabeledDataset, val: &LabeledDataset, epoch: usize, phase: &str) -> Result<f64> {
        let mut per_batch = Vec::new();
        for idx in epoch_batches(train.len(), self.batch_size, &mut self.rngs.shuffle) {
            let x = batch_tensor::<f32>(train, &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i] as usize).collect();
            let l = self
                .model
                .loss(&x, &labels, Mode::Train, &mut self.rngs.dropout, true)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            self.opt.step_module(&mut self.model);
            per_batch.push(LossBreakdown::from_components(l, 0.0, [0.0; 3]));
        }
        let eval = evaluate(&self.model, val)?;
        self.log.records.push(EpochRecord {
            epoch,
            phase: phase.into(),
            losses: LossBreakdown::mean_of(&per_batch),
            val_weighted_f1: eval.weighted_f1,
            val_accuracy: eval.accuracy,
        });
        Ok(eval.weighted_f1)
    }

    /// Trains epochs `first..=last` and returns the best of them.
    fn select(
        mut self,
        train: &LabeledDataset,
        val: &LabeledDataset,
        first: usize,
        last: usize,
        phase: &str,
    ) -> Result<(TempCnn<f32>, TrainingLog)> {
        if first == 1 {
            self.log.initial_val_weighted_f1 = evaluate(&self.model, val)?.weighted_f1;
        }
        let mut best = BestTracker::new();
        for epoch in first..=last {
            let score = self.epoch(train, val, epoch, phase)?;
            best.offer(epoch, score, &self.model);
        }
        let (epoch, score, model) = best.best.expect("at least one epoch");
        self.log.best_epoch = epoch;
        self.log.best_val_weighted_f1 = score;
        Ok((model, self.log))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetMeta, Domain, SitsSample};
    use std::cell::Cell;

    struct Counting<'a> {
        inner: &'a LabeledDataset,
        reads: Cell<usize>,
    }

    impl SampleSource for Counting<'_> {
        fn meta(&self) -> DatasetMeta {
            self.inner.meta()
        }
        fn len(&self) -> usize {
            self.inner.len()
        }
        fn read(&self, indices: &[usize]) -> LabeledDataset {
            self.reads.set(self.reads.get() + indices.len());
            self.inner.subset(indices)
        }
    }

    fn tiny(domain: Domain, n_poly: u32) -> LabeledDataset {
        let mut ds = LabeledDataset::new(6, 2, vec!["a".into(), "b".into()]).unwrap();
        for p in 0..n_poly {
            let class = (p % 2) as u16;
            for j in 0..4 {
                let v = class as f32 + 0.1 * j as f32;
                ds.push(SitsSample {
                    features: vec![v; 12],
                    class_label: class,
                    domain,
                    polygon_id: p,
                })
                .unwrap();
            }
        }
        ds
    }

    fn cfg(mode: Method, epochs: usize) -> RunConfig {
        RunConfig {
            epochs,
            batch_size: Some(8),
            ..RunConfig::for_mode(mode)
        }
    }

    fn counted(mode: Method, epochs: usize) -> (usize, usize, usize, TrainingLog) {
        let s = tiny(Domain::Source, 10);
        let t = tiny(Domain::Target, 6);
        let v = tiny(Domain::Target, 4);
        let (cs, ct, cv) = (
            Counting {
                inner: &s,
                reads: Cell::new(0),
            },
            Counting {
                inner: &t,
                reads: Cell::new(0),
            },
            Counting {
                inner: &v,
                reads: Cell::new(0),
            },
        );
        let (_, log) = train_strategy(&cs, &ct, &cv, &cfg(mode, epochs)).unwrap();
        (cs.reads.get(), ct.reads.get(), cv.reads.get(), log)
    }

    #[test]
    fn only_target_never_reads_source() {
        let (s, t, v, log) = counted(Method::OnlyTarget, 2);
        assert_eq!(s, 0);
        assert!(t > 0 && v > 0);
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn only_source_never_reads_target() {
        let (s, t, v, _) = counted(Method::OnlySource, 2);
        assert!(s > 0);
        assert_eq!((t, v), (0, 0));
    }

    #[test]
    fn source_target_reads_both() {
        let (s, t, v, _) = counted(Method::SourceTarget, 1);
        assert!(s > 0 && t > 0 && v > 0);
    }

    #[test]
    fn finetune_has_two_phases() {
        let (_, _, _, log) = counted(Method::Finetune, 4);
        let phases: Vec<&str> = log.records.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(phases, ["pretrain", "pretrain", "finetune", "finetune"]);
        assert!(log.best_epoch >= 3);
        let epochs: Vec<usize> = log.records.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, [1, 2, 3, 4]);
    }

    #[test]
    fn refed_mode_rejected() {
        let s = tiny(Domain::Source, 4);
        let r = train_strategy(&s, &s, &s, &cfg(Method::Refed, 1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn holdout_is_polygon_disjoint() {
        let s = tiny(Domain::Source, 10);
        let (a, b) = source_holdout(&s, 0.2, 3).unwrap();
        assert_eq!(a.len() + b.len(), s.len());
        for p in b.polygon_ids() {
            assert!(!a.polygon_ids().contains(p));
        }
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        let s = tiny(Domain::Source, 6);
        let t = tiny(Domain::Target, 6);
        let c = cfg(Method::SourceTarget, 2);
        let (m1, l1) = train_strategy(&s, &t, &t, &c).unwrap();
        let (m2, l2) = train_strategy(&s, &t, &t, &c).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
    }
}
