//! C ABI over `refed-core`.
//!
//! Datasets and models are opaque handles created by `*_load`/`*_new`
//! style functions and released with the matching `*_free`. Every fallible
//! function returns a [`RefedStatus`]; on failure a description of the
//! error is kept per thread and can be read with [`refed_last_error`].
//! Output buffers are always supplied by the caller together with their
//! length in elements. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use refed_core::checkpoint::{Checkpoint, Model};
use refed_core::cli::train_checkpoint;
use refed_core::config::RunConfig;
use refed_core::data::{load_dataset, save_dataset, Domain, LabeledDataset, SitsSample};
use refed_core::metrics::confusion;
use refed_core::preprocess::{polygon_split, DEFAULT_RATIOS};
use refed_core::synth::{generate, GeneratorConfig};
use refed_core::tempcnn::predict_proba;
use refed_core::Error;

/// Result of every fallible call. Values 3 to 9 match the exit codes of the
/// `refed` command line tool.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefedStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    NotFound = 3,
    /// Malformed dataset, checkpoint or JSON.
    Format = 4,
    Config = 5,
    /// Shapes, ranges or lengths do not fit.
    InvalidInput = 6,
    /// A computation produced a non-finite value.
    Numeric = 7,
    Io = 8,
    CheckFailed = 9,
    /// A caller-supplied buffer has the wrong length.
    BufferSize = 10,
    /// An internal invariant failed; the handle arguments are unchanged.
    Panic = 11,
}

/// Opaque labeled dataset.
pub struct RefedDataset {
    inner: LabeledDataset,
}

/// Opaque trained model together with its checkpoint header.
pub struct RefedModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RefedStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => RefedStatus::NotFound,
            Error::Format(_) | Error::Json(_) | Error::Checkpoint(_) => RefedStatus::Format,
            Error::Config(_) => RefedStatus::Config,
            Error::Shape(_) | Error::OutOfRange(_) | Error::InvalidInput(_) => RefedStatus::InvalidInput,
            Error::UnrecoverableGap | Error::NonFinite(_) => RefedStatus::Numeric,
            Error::Io(_) => RefedStatus::Io,
            Error::CheckFailed(_) => RefedStatus::CheckFailed,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn null(what: &str) -> Failure {
    Failure(RefedStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, records any failure and converts it to a status.
fn guard(body: impl FnOnce() -> FfiResult<()>) -> RefedStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RefedStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error".into());
            RefedStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RefedStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len != needed {
        return Err(Failure(
            RefedStatus::BufferSize,
            format!("{what} holds {len} elements, {needed} needed"),
        ));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// The message of the last failed call on this thread, or null if the last
/// call succeeded. Valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn refed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a SITSB dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn refed_dataset_load(path: *const c_char, out: *mut *mut RefedDataset) -> RefedStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = load_dataset(path)?;
        write_out(out, RefedDataset { inner })
    })
}

/// Writes a dataset as a SITSB file.
///
/// # Safety
/// `dataset` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn refed_dataset_save(dataset: *const RefedDataset, path: *const c_char) -> RefedStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        save_dataset(&ds.inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Builds a dataset from flat arrays. `features` holds `n * t_len * n_bands`
/// values, sample-major, then time, then band. `domains` holds 0 for
/// source and 1 for target. Classes are named `class_0`, `class_1`, ...
///
/// # Safety
/// Every array must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn refed_dataset_from_arrays(
    n: usize,
    t_len: usize,
    n_bands: usize,
    n_classes: usize,
    features: *const f32,
    labels: *const u16,
    polygon_ids: *const u32,
    domains: *const u8,
    out: *mut *mut RefedDataset,
) -> RefedStatus {
    guard(|| {
        let w = t_len
            .checked_mul(n_bands)
            .ok_or_else(|| Failure(RefedStatus::InvalidInput, "shape overflows".into()))?;
        let total = n
            .checked_mul(w)
            .ok_or_else(|| Failure(RefedStatus::InvalidInput, "shape overflows".into()))?;
        let features = slice(features, total, "features")?;
        let labels = slice(labels, n, "labels")?;
        let polygon_ids = slice(polygon_ids, n, "polygon_ids")?;
        let domains = slice(domains, n, "domains")?;
        let names = (0..n_classes).map(|k| format!("class_{k}")).collect();
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let domain = Domain::from_tag(domains[i]).ok_or_else(|| {
                Failure(
                    RefedStatus::InvalidInput,
                    format!("domain tag {} of sample {i}", domains[i]),
                )
            })?;
            samples.push(SitsSample {
                features: features[i * w..(i + 1) * w].to_vec(),
                class_label: labels[i],
                domain,
                polygon_id: polygon_ids[i],
            });
        }
        let inner = LabeledDataset::from_samples(t_len, n_bands, names, samples)?;
        write_out(out, RefedDataset { inner })
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn refed_dataset_len(dataset: *const RefedDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Series length, band count and class count.
///
/// # Safety
/// `dataset` must come from this library; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn refed_dataset_shape(
    dataset: *const RefedDataset,
    t_len: *mut usize,
    n_bands: *mut usize,
    n_classes: *mut usize,
) -> RefedStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.inner;
        if t_len.is_null() || n_bands.is_null() || n_classes.is_null() {
            return Err(null("shape output"));
        }
        *t_len = ds.t_len();
        *n_bands = ds.n_bands();
        *n_classes = ds.n_classes();
        Ok(())
    })
}

/// Copies the class labels into `out`, which must hold one per sample.
///
/// # Safety
/// `out` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn refed_dataset_labels(dataset: *const RefedDataset, out: *mut u16, len: usize) -> RefedStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.inner;
        out_slice(out, len, ds.len(), "labels")?.copy_from_slice(ds.labels());
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn refed_dataset_free(dataset: *mut RefedDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Generates a synthetic source/target pair. `config_json` is a generator
/// configuration, or null for the defaults.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; the outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn refed_synth_generate(
    config_json: *const c_char,
    source: *mut *mut RefedDataset,
    target: *mut *mut RefedDataset,
) -> RefedStatus {
    guard(|| {
        let cfg = match opt_str_arg(config_json, "config_json")? {
            Some(text) => GeneratorConfig::from_json(text)?,
            None => GeneratorConfig::default(),
        };
        if source.is_null() || target.is_null() {
            return Err(null("output handle"));
        }
        let (s, t) = generate(&cfg)?;
        write_out(source, RefedDataset { inner: s })?;
        write_out(target, RefedDataset { inner: t })
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn refed_model_load(path: *const c_char, out: *mut *mut RefedModel) -> RefedStatus {
    guard(|| {
        let inner = Checkpoint::load(str_arg(path, "path")?)?;
        write_out(out, RefedModel { inner })
    })
}

/// Writes a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn refed_model_save(model: *const RefedModel, path: *const c_char) -> RefedStatus {
    guard(|| {
        let m = handle(model, "model")?;
        m.inner.save(PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Trains one method. `mode` is one of `refed`, `only_source`,
/// `only_target`, `source_target`, `finetune`; `config_json` is a run
/// configuration or null for the defaults. The target is split by polygon
/// with ratios 0.5/0.2/0.3 and `split_seed`; the best epoch on the target
/// validation share is returned. Either dataset may be null if the mode
/// does not use it.
///
/// # Safety
/// Handles must be null or come from this library; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn refed_train(
    mode: *const c_char,
    config_json: *const c_char,
    source: *const RefedDataset,
    target: *const RefedDataset,
    split_seed: u64,
    out: *mut *mut RefedModel,
) -> RefedStatus {
    guard(|| {
        let mut cfg = match opt_str_arg(config_json, "config_json")? {
            Some(text) => RunConfig::from_json(text)?,
            None => RunConfig::default(),
        };
        cfg.mode = str_arg(mode, "mode")?.parse()?;
        let source = source.as_ref().map(|d| &d.inner);
        let target = target.as_ref().map(|d| &d.inner);
        let split = target
            .map(|t| polygon_split(t, DEFAULT_RATIOS, split_seed))
            .transpose()?;
        let (inner, _) = train_checkpoint(&cfg, source, target, split.as_ref())?;
        write_out(out, RefedModel { inner })
    })
}

/// Number of classes the model predicts; 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn refed_model_n_classes(model: *const RefedModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.header.n_classes)
}

/// 1 for a two-branch model, 0 for a single-branch baseline or null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn refed_model_is_two_branch(model: *const RefedModel) -> i32 {
    model
        .as_ref()
        .map_or(0, |m| matches!(m.inner.model, Model::Refed(_)) as i32)
}

fn probabilities(model: &RefedModel, dataset: &RefedDataset) -> FfiResult<Vec<f32>> {
    let ds = model.inner.prepare(&dataset.inner)?;
    Ok(predict_proba(&model.inner.model, &ds)?)
}

/// Class probabilities, `len(dataset) * n_classes` values, row-major. The
/// raw dataset is scaled the way the model was trained.
///
/// # Safety
/// `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn refed_model_predict_proba(
    model: *const RefedModel,
    dataset: *const RefedDataset,
    out: *mut f32,
    len: usize,
) -> RefedStatus {
    guard(|| {
        let (m, ds) = (handle(model, "model")?, handle(dataset, "dataset")?);
        let need = ds.inner.len() * m.inner.header.n_classes;
        let dst = out_slice(out, len, need, "probabilities")?;
        dst.copy_from_slice(&probabilities(m, ds)?);
        Ok(())
    })
}

/// Predicted class per sample (the most probable, lowest index on ties).
///
/// # Safety
/// `out` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn refed_model_predict(
    model: *const RefedModel,
    dataset: *const RefedDataset,
    out: *mut u32,
    len: usize,
) -> RefedStatus {
    guard(|| {
        let (m, ds) = (handle(model, "model")?, handle(dataset, "dataset")?);
        let dst = out_slice(out, len, ds.inner.len(), "predictions")?;
        let k = m.inner.header.n_classes;
        let p = probabilities(m, ds)?;
        for (d, row) in dst.iter_mut().zip(p.chunks(k)) {
            *d = refed_core::tempcnn::argmax_rows(row, k)[0] as u32;
        }
        Ok(())
    })
}

/// Weighted F1 and overall accuracy, in percent, of `predicted` against
/// `reference` (class indices below `n_classes`).
///
/// # Safety
/// Both arrays must hold `n` elements; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn refed_metrics(
    reference: *const u32,
    predicted: *const u32,
    n: usize,
    n_classes: usize,
    weighted_f1: *mut f64,
    accuracy: *mut f64,
) -> RefedStatus {
    guard(|| {
        let r: Vec<usize> = slice(reference, n, "reference")?.iter().map(|&v| v as usize).collect();
        let p: Vec<usize> = slice(predicted, n, "predicted")?.iter().map(|&v| v as usize).collect();
        if weighted_f1.is_null() || accuracy.is_null() {
            return Err(null("metric output"));
        }
        let cm = confusion(&r, &p, n_classes)?;
        *weighted_f1 = cm.weighted_f1()?;
        *accuracy = cm.accuracy()?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn refed_model_free(model: *mut RefedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
