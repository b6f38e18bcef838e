//! The `refed` command line: data generation, splitting, training,
//! evaluation, prediction, experiments, gradient checks and embedding
//! export.
//!
//! Every command is a deterministic function of its flags and input files.
//! Failures print a single JSON object to stderr,
//! `{"error":"<kind>","code":<exit code>,"message":"..."}`, and exit with
//! the code of the error family.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::baselines::train_strategy;
use crate::checkpoint::{Checkpoint, Model};
use crate::config::{Method, RunConfig};
use crate::data::{load_dataset, read_file, LabeledDataset};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, scale_own, ExperimentConfig, RunOutcome};
use crate::gradsuite::run_suite;
use crate::preprocess::{polygon_split, Partition, SplitAssignment};
use crate::refed::{self, render_embeddings};
use crate::report::format_sig;
use crate::synth::{write_synthetic, GeneratorConfig};
use crate::tempcnn::predict_proba;
use crate::train::{evaluate, TrainingLog};

#[derive(Debug, Parser)]
#[command(
    name = "refed",
    version,
    about = "Two-branch domain disentanglement for satellite image time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target pair.
    Synth {
        /// Generator configuration (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Polygon-aware train/validation/test split.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0.5,0.2,0.3")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method and write its best-epoch checkpoint.
    Train {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Split of the target dataset.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Run configuration (JSON); `mode` is taken from `--mode`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON-lines log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset or one partition of it.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Partition scored when a split is given.
        #[arg(long, default_value = "test")]
        partition: String,
        /// Metrics JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample predictions and class probabilities as CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated comparison of methods; prints the table.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Report JSON; printed to stdout after the table when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Invariant-branch features of a two-branch checkpoint as CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Normal output goes to `out`, the error
/// line to `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = writeln!(err, "{}", error_line("usage", code, text.lines().next().unwrap_or("")));
            }
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), e.exit_code(), &e.to_string()));
            e.exit_code()
        }
    }
}

fn error_line(kind: &str, code: i32, message: &str) -> String {
    serde_json::json!({ "error": kind, "code": code, "message": message }).to_string()
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { config, out: dir } => cmd_synth(config.as_deref(), &dir, out),
        Command::Split {
            data,
            ratios,
            seed,
            out: path,
        } => cmd_split(&data, &ratios, seed, &path, out),
        Command::Train {
            mode,
            source,
            target,
            split,
            config,
            out: path,
            log,
        } => cmd_train(
            mode.parse()?,
            source.as_deref(),
            target.as_deref(),
            split.as_deref(),
            config.as_deref(),
            &path,
            log.as_deref(),
            out,
        ),
        Command::Eval {
            ckpt,
            data,
            split,
            partition,
            out: path,
        } => cmd_eval(&ckpt, &data, split.as_deref(), &partition, path.as_deref(), out),
        Command::Predict { ckpt, data, out: path } => cmd_predict(&ckpt, &data, &path),
        Command::Experiment { config, out: path } => cmd_experiment(&config, path.as_deref(), out),
        Command::Gradcheck { tol, seeds } => cmd_gradcheck(tol, seeds, out),
        Command::ExportEmbeddings {
            ckpt,
            data,
            level,
            out: path,
        } => cmd_export_embeddings(&ckpt, &data, level, &path),
    }
}

fn io(r: std::io::Result<()>) -> Result<()> {
    r.map_err(Error::Io)
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))
}

pub fn cmd_synth(config: Option<&Path>, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = match config {
        Some(p) => GeneratorConfig::from_json(&read_text(p)?)?,
        None => GeneratorConfig::default(),
    };
    let (s, t) = write_synthetic(&cfg, dir)?;
    io(writeln!(out, "wrote {} and {}", s.display(), t.display()))
}

pub fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("ratios must be three comma-separated numbers, got {text:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("ratios must be three comma-separated numbers, got {text:?}")))
}

pub fn cmd_split(data: &Path, ratios: &str, seed: u64, path: &Path, out: &mut dyn Write) -> Result<()> {
    let ds = load_dataset(data)?;
    let split = polygon_split(&ds, parse_ratios(ratios)?, seed)?;
    split.save(path)?;
    io(writeln!(out, "wrote {}", path.display()))
}

fn require<T>(v: Option<T>, flag: &str, mode: Method) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("--{flag} is required for mode {mode}")))
}

/// Trains `cfg.mode` on raw datasets: each is scaled with its own
/// statistics when `cfg.scale` is set, then the target is cut by `split`.
/// Inputs a method does not use may be `None`.
pub fn train_checkpoint(
    cfg: &RunConfig,
    source: Option<&LabeledDataset>,
    target: Option<&LabeledDataset>,
    split: Option<&SplitAssignment>,
) -> Result<(Checkpoint, TrainingLog)> {
    cfg.validate()?;
    let mode = cfg.mode;
    let prepare = |ds: &LabeledDataset| if cfg.scale { scale_own(ds) } else { Ok(ds.clone()) };
    let src = match mode {
        Method::OnlyTarget => None,
        _ => Some(prepare(require(source, "source", mode)?)?),
    };
    let (train, val) = match mode {
        Method::OnlySource => (None, None),
        _ => {
            let tgt = prepare(require(target, "target", mode)?)?;
            let sp = require(split, "split", mode)?;
            (
                Some(sp.subset(&tgt, Partition::Train)?),
                Some(sp.subset(&tgt, Partition::Validation)?),
            )
        }
    };
    // methods that skip an input get an empty dataset of matching shape
    let template = src.as_ref().or(train.as_ref()).expect("every mode uses some data");
    let empty = template.subset(&[]);
    let src = src.as_ref().unwrap_or(&empty);
    let train = train.as_ref().unwrap_or(&empty);
    let val = val.as_ref().unwrap_or(&empty);

    let (model, log) = match mode {
        Method::Refed => {
            let (m, log) = refed::fit(src, train, val, cfg)?;
            (Model::Refed(m), log)
        }
        _ => {
            let (m, log) = train_strategy(src, train, val, cfg)?;
            (Model::TempCnn(m), log)
        }
    };
    let ckpt = Checkpoint::new(
        model,
        cfg.clone(),
        template.class_names().to_vec(),
        log.best_epoch,
        log.best_val_weighted_f1,
    );
    Ok((ckpt, log))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    mode: Method,
    source: Option<&Path>,
    target: Option<&Path>,
    split: Option<&Path>,
    config: Option<&Path>,
    path: &Path,
    log_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_json(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    cfg.mode = mode;
    let source = source.map(load_dataset).transpose()?;
    let target = target.map(load_dataset).transpose()?;
    let split = split.map(SplitAssignment::load).transpose()?;
    let (ckpt, log) = train_checkpoint(&cfg, source.as_ref(), target.as_ref(), split.as_ref())?;
    ckpt.save(path)?;
    if let Some(lp) = log_path {
        log.write_jsonl(lp)?;
    }
    io(writeln!(
        out,
        "best epoch {} validation weighted F1 {}; wrote {}",
        log.best_epoch,
        format_sig(log.best_val_weighted_f1, 6),
        path.display()
    ))
}

fn parse_partition(name: &str) -> Result<Partition> {
    match name {
        "train" => Ok(Partition::Train),
        "validation" | "val" => Ok(Partition::Validation),
        "test" => Ok(Partition::Test),
        _ => Err(Error::Config(format!("unknown partition {name:?}"))),
    }
}

/// Loads a checkpoint and a dataset scaled the way the checkpoint expects.
fn load_for_inference(ckpt: &Path, data: &Path) -> Result<(Checkpoint, LabeledDataset)> {
    let c = Checkpoint::load(ckpt)?;
    let ds = c.prepare(&load_dataset(data)?)?;
    Ok((c, ds))
}

pub fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    split: Option<&Path>,
    partition: &str,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let part = parse_partition(partition)?;
    let (c, ds) = load_for_inference(ckpt, data)?;
    let ds = match split {
        Some(p) => SplitAssignment::load(p)?.subset(&ds, part)?,
        None => ds,
    };
    if ds.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let eval = evaluate(&c.model, &ds)?;
    let text = serde_json::to_string_pretty(&eval).expect("metrics serialize") + "\n";
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => io(out.write_all(text.as_bytes()))?,
    }
    Ok(())
}

/// `id,predicted_label,p_0..p_{K-1}`, one row per sample in file order,
/// probabilities with 9 significant digits.
pub fn render_predictions(model: &Model, ds: &LabeledDataset) -> Result<String> {
    let k = ds.n_classes();
    let probs = predict_proba(model, ds)?;
    let mut text = String::from("id,predicted_label");
    for j in 0..k {
        write!(text, ",p_{j}").unwrap();
    }
    text.push('\n');
    for (i, row) in probs.chunks(k).enumerate() {
        let label = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
            .0;
        write!(text, "{i},{label}").unwrap();
        for &p in row {
            text.push(',');
            text.push_str(&format_sig(p as f64, 9));
        }
        text.push('\n');
    }
    Ok(text)
}

pub fn cmd_predict(ckpt: &Path, data: &Path, path: &Path) -> Result<()> {
    let (c, ds) = load_for_inference(ckpt, data)?;
    std::fs::write(path, render_predictions(&c.model, &ds)?)?;
    Ok(())
}

pub fn cmd_experiment(config: &Path, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::from_json(&read_text(config)?)?;
    let (source, target) = cfg.datasets()?;
    let mut progress = |o: &RunOutcome| {
        eprintln!(
            "{} repeat {}: test weighted F1 {:.2}",
            o.method, o.repeat, o.result.test.weighted_f1
        );
    };
    let report = run_experiment(&source, &target, &cfg, Some(&mut progress))?;
    io(out.write_all(report.render_table().as_bytes()))?;
    match path {
        Some(p) => std::fs::write(p, report.to_json())?,
        None => io(out.write_all(report.to_json().as_bytes()))?,
    }
    Ok(())
}

pub fn cmd_gradcheck(tol: f64, seeds: u64, out: &mut dyn Write) -> Result<()> {
    if !(tol > 0.0) || seeds == 0 {
        return Err(Error::Config("need a positive tolerance and at least one seed".into()));
    }
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..seeds {
        let report = run_suite(seed, tol)?;
        for e in &report.entries {
            let status = if e.report.passed() { "ok" } else { "FAIL" };
            io(writeln!(
                out,
                "seed {seed:>3} {:<28} max rel err {:.3e} {status}",
                e.case, e.report.max_rel_err
            ))?;
            if !e.report.passed() {
                failures.push(format!("{}@{seed}", e.case));
            }
        }
        worst = worst.max(report.max_rel_err);
    }
    io(writeln!(out, "max relative error {worst:.3e} (tolerance {tol:.0e})"))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "gradient mismatch in {}",
            failures.join(", ")
        )))
    }
}

pub fn cmd_export_embeddings(ckpt: &Path, data: &Path, level: usize, path: &Path) -> Result<()> {
    if level > 2 {
        return Err(Error::Config(format!("level must be 0, 1 or 2, got {level}")));
    }
    let (c, ds) = load_for_inference(ckpt, data)?;
    let Model::Refed(model) = &c.model else {
        return Err(Error::Config("embeddings need a two-branch checkpoint".into()));
    };
    std::fs::write(path, render_embeddings(&ds, model, level)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_parse() {
        assert_eq!(parse_ratios("0.5,0.2,0.3").unwrap(), [0.5, 0.2, 0.3]);
        assert!(matches!(parse_ratios("0.5,0.5"), Err(Error::Config(_))));
        assert!(matches!(parse_ratios("a,b,c"), Err(Error::Config(_))));
    }

    #[test]
    fn partitions_parse() {
        assert_eq!(parse_partition("val").unwrap(), Partition::Validation);
        assert!(parse_partition("holdout").is_err());
    }

    #[test]
    fn usage_errors_are_one_json_line() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(["refed", "train"], &mut out, &mut err);
        assert_eq!(code, 2);
        let text = String::from_utf8(err).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["error"], "usage");
    }

    #[test]
    fn missing_file_has_its_own_code() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(
            [
                "refed",
                "split",
                "--data",
                "/nonexistent/x.sitsb",
                "--out",
                "/tmp/never.json",
            ],
            &mut out,
            &mut err,
        );
        assert_eq!(code, 3);
        let v: serde_json::Value = serde_json::from_slice(&err).unwrap();
        assert_eq!(v["error"], "not_found");
        assert_eq!(v["code"], 3);
    }

    #[test]
    fn unknown_mode_is_a_config_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(
            ["refed", "train", "--mode", "magic", "--out", "/tmp/x"],
            &mut out,
            &mut err,
        );
        assert_eq!(code, 5);
    }
}
