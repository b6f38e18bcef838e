use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refed_core::checkpoint::{Checkpoint, Model};
use refed_core::cli::{main_with, train_checkpoint};
use refed_core::config::{Method, RunConfig};
use refed_core::data::{load_dataset, Domain, FeatureKind};
use refed_core::experiment::scale_own;
use refed_core::metrics::Evaluation;
use refed_core::nn::Mode;
use refed_core::preprocess::{polygon_split, Partition, DEFAULT_RATIOS};
use refed_core::refed::{RefedBatch, RefedModel};
use refed_core::synth::{generate, GeneratorConfig, SOURCE_FILE, TARGET_FILE};
use refed_core::tempcnn::{batch_tensor, eval_forward, predict, predict_proba, ArchConfig, Predictor};

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        polygons_per_class: 8,
        mean_pixels: 5.0,
        min_pixels: 3,
        seed: 11,
        ..GeneratorConfig::with_shape(3, 12, 2)
    }
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("refed").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_split_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.json"), tiny_generator().to_json()).unwrap();
    std::fs::write(d.join("run.json"), r#"{"epochs":3,"batch_size":32}"#).unwrap();
    ok(&["synth", "--config", p(&d.join("gen.json")), "--out", p(d)]);
    let target = d.join(TARGET_FILE);
    let source = d.join(SOURCE_FILE);
    ok(&[
        "split",
        "--data",
        p(&target),
        "--seed",
        "2",
        "--out",
        p(&d.join("split.json")),
    ]);
    for mode in ["refed", "only_target", "source_target"] {
        let ckpt = d.join(format!("{mode}.ckpt"));
        let log = d.join(format!("{mode}.jsonl"));
        ok(&[
            "train",
            "--mode",
            mode,
            "--source",
            p(&source),
            "--target",
            p(&target),
            "--split",
            p(&d.join("split.json")),
            "--config",
            p(&d.join("run.json")),
            "--out",
            p(&ckpt),
            "--log",
            p(&log),
        ]);
        let lines = std::fs::read_to_string(&log).unwrap();
        assert_eq!(lines.lines().count(), 3, "{mode}: one log line per epoch");

        let metrics = ok(&[
            "eval",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&target),
            "--split",
            p(&d.join("split.json")),
        ]);
        let eval: Evaluation = serde_json::from_str(&metrics).unwrap();
        let ds = load_dataset(&target).unwrap();
        let split = refed_core::preprocess::SplitAssignment::load(d.join("split.json")).unwrap();
        assert_eq!(
            eval.n_samples as usize,
            split.indices(&ds, Partition::Test).unwrap().len()
        );
        assert!((0.0..=100.0).contains(&eval.weighted_f1));

        let preds = d.join(format!("{mode}.csv"));
        ok(&["predict", "--ckpt", p(&ckpt), "--data", p(&target), "--out", p(&preds)]);
        let text = std::fs::read_to_string(&preds).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "id,predicted_label,p_0,p_1,p_2");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), ds.len());
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells[0], i.to_string());
            let probs: Vec<f64> = cells[2..].iter().map(|c| c.parse().unwrap()).collect();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let best = (0..3).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
            assert_eq!(cells[1], best.to_string());
        }
    }
    let (code, _, _) = run(&[
        "export-embeddings",
        "--ckpt",
        p(&d.join("only_target.ckpt")),
        "--data",
        p(&target),
        "--level",
        "1",
        "--out",
        p(&d.join("e.csv")),
    ]);
    assert_ne!(code, 0, "a single-branch checkpoint has no invariant branch to export");
    ok(&[
        "export-embeddings",
        "--ckpt",
        p(&d.join("refed.ckpt")),
        "--data",
        p(&target),
        "--level",
        "1",
        "--out",
        p(&d.join("e.csv")),
    ]);
    let emb = std::fs::read_to_string(d.join("e.csv")).unwrap();
    assert_eq!(emb.lines().count(), load_dataset(&target).unwrap().len() + 1);
}

#[test]
fn a_separable_training_set_is_fit_perfectly() {
    let gen = GeneratorConfig {
        sigma_polygon: 0.01,
        sigma_pixel: 0.01,
        ..tiny_generator()
    };
    let (_, target) = generate(&gen).unwrap();
    let cfg = RunConfig {
        mode: Method::OnlyTarget,
        epochs: 40,
        batch_size: Some(16),
        dropout: 0.0,
        ..RunConfig::default()
    };
    let split = polygon_split(&target, DEFAULT_RATIOS, 0).unwrap();
    let (ckpt, _) = train_checkpoint(&cfg, None, Some(&target), Some(&split)).unwrap();
    let train = ckpt.prepare(&split.subset(&target, Partition::Train).unwrap()).unwrap();
    let eval = refed_core::train::evaluate(&ckpt.model, &train).unwrap();
    assert!(eval.weighted_f1 >= 99.0, "train weighted F1 {}", eval.weighted_f1);
}

fn small_refed() -> (RefedModel<f64>, RefedBatch<f64>) {
    let (s, t) = generate(&GeneratorConfig {
        polygons_per_class: 1,
        mean_pixels: 2.0,
        min_pixels: 2,
        ..GeneratorConfig::with_shape(3, 6, 2)
    })
    .unwrap();
    let (s, t) = (scale_own(&s).unwrap(), scale_own(&t).unwrap());
    let s = s.subset(&[0, 1]);
    let t = t.subset(&[0, 1]);
    let mut arch = ArchConfig::new(s.meta());
    arch.dropout = 0.0;
    let model = RefedModel::<f64>::new(arch, 3, 0.5, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    (model, RefedBatch::from_parts(&s, &t).unwrap())
}

fn mean_nll(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[test]
fn branch_losses_match_a_recomputation_from_logits() {
    let (mut model, batch) = small_refed();
    assert_eq!(batch.len(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let task = model.loss_task(&batch, Mode::Eval, &mut rng).unwrap();
    let domain = model.loss_domain(&batch, Mode::Eval, &mut rng).unwrap();

    // The task head reads the invariant branch; its logits are the class
    // logits the model predicts with.
    let (_, _, logits) = eval_forward(&model.g_inv, &model.f_task, &batch.x).unwrap();
    assert!((task - mean_nll(&logits.data, 3, &batch.labels)).abs() < 1e-12);

    // The domain head reads the specific branch; the first two rows come
    // from the source, the last two from the target.
    assert_eq!(
        batch.domains,
        [Domain::Source, Domain::Source, Domain::Target, Domain::Target]
    );
    let (_, _, dom_logits) = eval_forward(&model.g_spe, &model.f_dom, &batch.x).unwrap();
    assert!((domain - mean_nll(&dom_logits.data, 2, &[0, 0, 1, 1])).abs() < 1e-12);
    assert!(task.is_finite() && domain.is_finite() && task > 0.0 && domain > 0.0);
}

#[test]
fn prediction_ignores_the_specific_branch_and_domain_head() {
    let (s, t) = generate(&tiny_generator()).unwrap();
    let cfg = RunConfig {
        epochs: 2,
        batch_size: Some(32),
        ..RunConfig::default()
    };
    let split = polygon_split(&t, DEFAULT_RATIOS, 1).unwrap();
    let (ckpt, _) = train_checkpoint(&cfg, Some(&s), Some(&t), Some(&split)).unwrap();
    let data = ckpt.prepare(&t).unwrap();
    let before = predict_proba(&ckpt.model, &data).unwrap();
    let mut zeroed = ckpt.model.clone();
    zeroed.zero_tensors(&|name| name.starts_with("g_spe.") || name.starts_with("f_dom."));
    assert_ne!(zeroed, ckpt.model);
    let after = predict_proba(&zeroed, &data).unwrap();
    assert_eq!(
        before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    // Specific features do change once that branch is wiped.
    if let (Model::Refed(a), Model::Refed(b)) = (&ckpt.model, &zeroed) {
        let x = batch_tensor::<f32>(&data, &[0, 1, 2]);
        assert_ne!(
            a.branch_features(&x, 1, FeatureKind::Specific).unwrap(),
            b.branch_features(&x, 1, FeatureKind::Specific).unwrap()
        );
    } else {
        panic!("expected a two-branch model");
    }
}

#[test]
fn saved_checkpoints_predict_identically() {
    let (s, t) = generate(&tiny_generator()).unwrap();
    let split = polygon_split(&t, DEFAULT_RATIOS, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for mode in [Method::Refed, Method::SourceTarget, Method::Finetune] {
        let cfg = RunConfig {
            mode,
            epochs: 2,
            batch_size: Some(32),
            ..RunConfig::default()
        };
        let (ckpt, _) = train_checkpoint(&cfg, Some(&s), Some(&t), Some(&split)).unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
        let data = ckpt.prepare(&t).unwrap();
        assert_eq!(
            predict(&ckpt.model, &data).unwrap(),
            predict(&back.model, &data).unwrap()
        );
        assert_eq!(
            predict_proba(&ckpt.model, &data).unwrap(),
            predict_proba(&back.model, &data).unwrap()
        );
        assert_eq!(back.model.meta(), ckpt.model.meta());
    }
}

#[test]
fn training_improves_on_the_initial_model() {
    let (s, t) = generate(&GeneratorConfig {
        polygons_per_class: 20,
        ..tiny_generator()
    })
    .unwrap();
    let cfg = RunConfig {
        epochs: 15,
        batch_size: Some(64),
        ..RunConfig::default()
    };
    let split = polygon_split(&t, DEFAULT_RATIOS, 0).unwrap();
    let (_, log) = train_checkpoint(&cfg, Some(&s), Some(&t), Some(&split)).unwrap();
    assert!(
        log.best_val_weighted_f1 >= log.initial_val_weighted_f1 + 30.0,
        "initial {} best {}",
        log.initial_val_weighted_f1,
        log.best_val_weighted_f1
    );
}
