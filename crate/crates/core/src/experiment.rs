//! The repeated split-train-evaluate protocol and its report.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::baselines::train_strategy;
use crate::checkpoint::Model;
use crate::config::{hex_digest, Method, RunConfig};
use crate::data::{check_compatible, load_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, Evaluation};
use crate::preprocess::{apply_scaling, fit_scaling, polygon_split, Partition, DEFAULT_RATIOS};
use crate::refed;
use crate::report::render_table;
use crate::synth::{generate, GeneratorConfig};
use crate::train::{evaluate, TrainingLog};

/// Experiment description, read from JSON. Data come either from two
/// SITSB files or from the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub generator: Option<GeneratorConfig>,
    pub methods: Vec<Method>,
    pub n_repeats: usize,
    pub base_seed: u64,
    pub ratios: [f64; 3],
    /// Training settings shared by every method; `mode` and `seed` are set
    /// per run and `batch_size` falls back to the per-method overrides below.
    pub train: RunConfig,
    pub refed_batch_size: Option<usize>,
    pub baseline_batch_size: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            generator: None,
            methods: vec![
                Method::OnlySource,
                Method::OnlyTarget,
                Method::SourceTarget,
                Method::Finetune,
                Method::Refed,
            ],
            n_repeats: 5,
            base_seed: 0,
            ratios: DEFAULT_RATIOS,
            train: RunConfig::default(),
            refed_batch_size: None,
            baseline_batch_size: None,
        }
    }
}

/// Epochs per run in the benchmark comparison.
pub const BENCHMARK_EPOCHS: usize = 50;
pub const BENCHMARK_REFED_BATCH: usize = 128;
pub const BENCHMARK_BASELINE_BATCH: usize = 64;

impl ExperimentConfig {
    /// The method comparison on [`GeneratorConfig::benchmark`]: five
    /// repeats of 50 epochs for the four methods that are ordered against
    /// each other, with batches scaled down to the smaller data.
    pub fn benchmark() -> Self {
        Self {
            generator: Some(GeneratorConfig::benchmark()),
            methods: vec![
                Method::OnlySource,
                Method::OnlyTarget,
                Method::SourceTarget,
                Method::Refed,
            ],
            train: RunConfig {
                epochs: BENCHMARK_EPOCHS,
                ..RunConfig::default()
            },
            refed_batch_size: Some(BENCHMARK_REFED_BATCH),
            baseline_batch_size: Some(BENCHMARK_BASELINE_BATCH),
            ..Self::default()
        }
    }

    /// The configuration a single run of `method` in repeat `repeat` uses.
    pub fn run_config(&self, method: Method, repeat: usize) -> RunConfig {
        let batch = self.train.batch_size.or(match method {
            Method::Refed => self.refed_batch_size,
            _ => self.baseline_batch_size,
        });
        RunConfig {
            mode: method,
            seed: self.base_seed + repeat as u64,
            batch_size: batch,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_repeats == 0 || self.methods.is_empty() {
            return Err(Error::Config("need at least one repeat and one method".into()));
        }
        let files = self.source.is_some() && self.target.is_some();
        if files == self.generator.is_some() || self.source.is_some() != self.target.is_some() {
            return Err(Error::Config(
                "give either both source and target files or a generator".into(),
            ));
        }
        for &m in &self.methods {
            self.run_config(m, 0).validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Loads or generates the two datasets.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match (&self.source, &self.target, &self.generator) {
            (Some(s), Some(t), None) => Ok((load_dataset(s)?, load_dataset(t)?)),
            (None, None, Some(g)) => generate(g),
            _ => Err(Error::Config(
                "give either both source and target files or a generator".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub repeat: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_weighted_f1: f64,
    pub test: Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: Vec<RunResult>,
    pub weighted_f1: MeanStd,
    pub accuracy: MeanStd,
    pub per_class_f1: Vec<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub class_names: Vec<String>,
    pub methods: Vec<MethodSummary>,
}

impl ExperimentReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per method: weighted F1 and accuracy as mean ± std over
    /// repeats, then per-class F1 means.
    pub fn render_table(&self) -> String {
        let mut header = vec!["Method".to_string(), "Weighted F1".into(), "Accuracy".into()];
        header.extend(self.class_names.iter().cloned());
        let pm = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|s| {
                let mut row = vec![s.method.name().to_string(), pm(&s.weighted_f1), pm(&s.accuracy)];
                row.extend(s.per_class_f1.iter().map(|c| format!("{:.2}", c.mean)));
                row
            })
            .collect();
        render_table(&header, &rows)
    }
}

/// Percentile-scales a dataset with its own statistics.
pub fn scale_own(ds: &LabeledDataset) -> Result<LabeledDataset> {
    apply_scaling(ds, &fit_scaling(ds)?)
}

/// Everything one run produced, handed to the progress callback.
pub struct RunOutcome<'a> {
    pub method: Method,
    pub repeat: usize,
    pub result: &'a RunResult,
    pub model: &'a Model,
    pub log: &'a TrainingLog,
    /// The scaled target test partition the run was scored on.
    pub test: &'a LabeledDataset,
}

/// Called after every run.
pub type Progress<'a> = &'a mut dyn FnMut(&RunOutcome);

/// For each repeat `r`, splits the target with seed `base_seed + r`,
/// trains every method with that seed and evaluates on the target test
/// partition.
pub fn run_experiment(
    source: &LabeledDataset,
    target: &LabeledDataset,
    cfg: &ExperimentConfig,
    progress: Option<Progress>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    check_compatible(&source.meta(), &target.meta())?;
    let (source, target) = if cfg.train.scale {
        (scale_own(source)?, scale_own(target)?)
    } else {
        (source.clone(), target.clone())
    };
    let mut progress = progress;
    let seeds: Vec<u64> = (0..cfg.n_repeats).map(|r| cfg.base_seed + r as u64).collect();
    let mut runs: Vec<Vec<RunResult>> = vec![Vec::new(); cfg.methods.len()];
    for (r, &seed) in seeds.iter().enumerate() {
        let split = polygon_split(&target, cfg.ratios, seed)?;
        let train = split.subset(&target, Partition::Train)?;
        let val = split.subset(&target, Partition::Validation)?;
        let test = split.subset(&target, Partition::Test)?;
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let run_cfg = cfg.run_config(method, r);
            let (model, log) = match method {
                Method::Refed => {
                    let (m, log) = refed::fit(&source, &train, &val, &run_cfg)?;
                    (Model::Refed(m), log)
                }
                _ => {
                    let (m, log) = train_strategy(&source, &train, &val, &run_cfg)?;
                    (Model::TempCnn(m), log)
                }
            };
            let eval = evaluate(&model, &test)?;
            let result = RunResult {
                repeat: r,
                seed,
                best_epoch: log.best_epoch,
                best_val_weighted_f1: log.best_val_weighted_f1,
                test: eval,
            };
            if let Some(p) = progress.as_mut() {
                p(&RunOutcome {
                    method,
                    repeat: r,
                    result: &result,
                    model: &model,
                    log: &log,
                    test: &test,
                });
            }
            runs[mi].push(result);
        }
    }
    let methods = cfg
        .methods
        .iter()
        .zip(runs)
        .map(|(&method, runs)| summarize(method, runs, target.n_classes()))
        .collect();
    Ok(ExperimentReport {
        config_digest: hex_digest(cfg.to_json().as_bytes()),
        seeds,
        class_names: target.class_names().to_vec(),
        methods,
    })
}

fn summarize(method: Method, runs: Vec<RunResult>, n_classes: usize) -> MethodSummary {
    let wf1: Vec<f64> = runs.iter().map(|r| r.test.weighted_f1).collect();
    let acc: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
    let per_class = (0..n_classes)
        .map(|k| MeanStd::of(&runs.iter().map(|r| r.test.per_class_f1[k]).collect::<Vec<_>>()))
        .collect();
    MethodSummary {
        method,
        weighted_f1: MeanStd::of(&wf1),
        accuracy: MeanStd::of(&acc),
        per_class_f1: per_class,
        runs,
    }
}
