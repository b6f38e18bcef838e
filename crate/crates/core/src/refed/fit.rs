use std::fmt::Write as _;
use std::path::Path;

use super::{RefedBatch, RefedModel};
use crate::config::RunConfig;
use crate::data::{Domain, FeatureKind, LabeledDataset, SampleSource};
use crate::error::Result;
use crate::nn::{AdamW, Mode};
use crate::report::format_sig;
use crate::tempcnn::{batch_tensor, ArchConfig, PREDICT_CHUNK};
use crate::train::{
    epoch_batches, evaluate, require_compatible, require_non_empty, BestTracker, EpochRecord, LossBreakdown,
    RngStreams, TrainingLog,
};

/// Trains the two-branch model on source plus target training samples and
/// returns the epoch with the best target validation weighted F1.
pub fn fit(
    source: &dyn SampleSource,
    target_train: &dyn SampleSource,
    target_val: &dyn SampleSource,
    cfg: &RunConfig,
) -> Result<(RefedModel<f32>, TrainingLog)> {
    cfg.validate()?;
    require_compatible(&[source, target_train, target_val])?;
    require_non_empty("source", source)?;
    require_non_empty("target training", target_train)?;
    require_non_empty("target validation", target_val)?;

    let src = source.read_all();
    let tgt = target_train.read_all();
    let val = target_val.read_all();
    let pool_ds = src.concat(&tgt)?;
    // domain labels come from which input a sample was drawn from
    let pool_domains: Vec<Domain> = (0..pool_ds.len())
        .map(|i| if i < src.len() { Domain::Source } else { Domain::Target })
        .collect();

    let meta = src.meta();
    let mut arch = ArchConfig::new(meta);
    arch.dropout = cfg.dropout;
    arch.pooling = cfg.pooling;

    let mut rngs = RngStreams::new(cfg.seed);
    let mut model = RefedModel::<f32>::new(arch, meta.n_classes, cfg.tau, cfg.normalize_embeddings, &mut rngs.init)?;
    let mut opt = AdamW::<f32>::new(cfg.adamw());
    let mut log = TrainingLog {
        initial_val_weighted_f1: evaluate(&model, &val)?.weighted_f1,
        ..Default::default()
    };
    let mut best = BestTracker::new();

    for epoch in 1..=cfg.epochs {
        let mut per_batch = Vec::new();
        for idx in epoch_batches(pool_ds.len(), cfg.batch_size(), &mut rngs.shuffle) {
            let mut batch = RefedBatch::<f32>::from_dataset(&pool_ds, &idx);
            batch.domains = idx.iter().map(|&i| pool_domains[i]).collect();
            let losses = model.forward_losses(&batch, Mode::Train, &mut rngs.dropout, true)?;
            opt.step_module(&mut model);
            per_batch.push(losses);
        }
        let eval = evaluate(&model, &val)?;
        log.records.push(EpochRecord {
            epoch,
            phase: "train".into(),
            losses: LossBreakdown::mean_of(&per_batch),
            val_weighted_f1: eval.weighted_f1,
            val_accuracy: eval.accuracy,
        });
        best.offer(epoch, eval.weighted_f1, &model);
    }
    let (best_epoch, score, model) = best.best.expect("at least one epoch");
    log.best_epoch = best_epoch;
    log.best_val_weighted_f1 = score;
    Ok((model, log))
}

/// CSV of invariant-branch features at `level`: `id,class,domain,f_0..`.
pub fn render_embeddings(dataset: &LabeledDataset, model: &RefedModel<f32>, level: usize) -> Result<String> {
    let dim = model.arch().tap_dim(level.min(2));
    let mut out = String::from("id,class,domain");
    for j in 0..dim {
        write!(out, ",f_{j}").unwrap();
    }
    out.push('\n');
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let x = batch_tensor::<f32>(dataset, chunk);
        let feats = model.branch_features(&x, level, FeatureKind::Invariant)?;
        for (row, &i) in chunk.iter().enumerate() {
            let domain = match dataset.domains()[i] {
                Domain::Source => "source",
                Domain::Target => "target",
            };
            write!(out, "{i},{},{domain}", dataset.labels()[i]).unwrap();
            for &v in feats.row(row) {
                out.push(',');
                out.push_str(&format_sig(v as f64, 9));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_embeddings(
    dataset: &LabeledDataset,
    model: &RefedModel<f32>,
    level: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = render_embeddings(dataset, model, level)?;
    std::fs::write(path, text)?;
    Ok(())
}
