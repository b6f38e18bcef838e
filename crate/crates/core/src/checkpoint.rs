//! Model checkpoints: the magic `REFD0001`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then a flat little-endian `f32` payload.
//!
//! The header names every tensor (trainable parameters and batch-norm
//! running statistics alike) with its shape and byte range in the payload,
//! so a checkpoint can be inspected without this crate.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, RunConfig};
use crate::data::{read_file, DatasetMeta, LabeledDataset};
use crate::error::{Error, Result};
use crate::experiment::scale_own;
use crate::nn::{Module, Tensor};
use crate::refed::RefedModel;
use crate::tempcnn::{ArchConfig, Predictor, TempCnn};

pub const MAGIC: &[u8; 8] = b"REFD0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Single-branch TempCNN (the baselines).
    Tempcnn,
    /// Two-branch model with invariant and specific encoders.
    Refed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub config: RunConfig,
    /// SHA-256 of the compact JSON of `config`.
    pub config_digest: String,
    pub best_epoch: usize,
    pub best_val_weighted_f1: f64,
    pub tensors: Vec<TensorEntry>,
}

/// A deserialized network of either kind.
// Two-branch models are about twice the size of single-branch ones; a
// handful of them live at a time, so boxing would buy nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    TempCnn(TempCnn<f32>),
    Refed(RefedModel<f32>),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::TempCnn(_) => ModelKind::Tempcnn,
            Model::Refed(_) => ModelKind::Refed,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        match self {
            Model::TempCnn(m) => *m.arch(),
            Model::Refed(m) => *m.arch(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::TempCnn(m) => m.n_classes(),
            Model::Refed(m) => m.n_classes(),
        }
    }

    fn module(&self) -> &dyn Module<f32> {
        match self {
            Model::TempCnn(m) => m,
            Model::Refed(m) => m,
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module<f32> {
        match self {
            Model::TempCnn(m) => m,
            Model::Refed(m) => m,
        }
    }

    /// Every named tensor, parameters first, in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        let m = self.module();
        m.visit_params("", &mut |name, p| {
            out.push((name, p.value.shape.clone(), p.value.data.clone()))
        });
        m.visit_buffers("", &mut |name, b| out.push((name, vec![b.len()], b.to_vec())));
        out
    }

    /// Overwrites every tensor whose name satisfies `select` with zeros.
    pub fn zero_tensors(&mut self, select: &dyn Fn(&str) -> bool) {
        let m = self.module_mut();
        m.visit_params_mut("", &mut |name, p| {
            if select(&name) {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        m.visit_buffers_mut("", &mut |name, b| {
            if select(&name) {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }
}

impl Predictor for Model {
    fn meta(&self) -> DatasetMeta {
        match self {
            Model::TempCnn(m) => m.meta(),
            Model::Refed(m) => m.meta(),
        }
    }

    fn eval_logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Model::TempCnn(m) => m.eval_logits(x),
            Model::Refed(m) => m.eval_logits(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(
        model: Model,
        config: RunConfig,
        class_names: Vec<String>,
        best_epoch: usize,
        best_val_weighted_f1: f64,
    ) -> Self {
        let header = CheckpointHeader {
            kind: model.kind(),
            arch: model.arch(),
            n_classes: model.n_classes(),
            class_names,
            config_digest: hex_digest(config.to_json().as_bytes()),
            config,
            best_epoch,
            best_val_weighted_f1,
            tensors: Vec::new(),
        };
        Self { header, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.tensors.clear();
        let mut payload = Vec::new();
        for (name, shape, data) in self.model.named_tensors() {
            header.tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
                bytes: data.len() * 4,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing REFD0001 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad(format!("header of {hlen} bytes runs past end of file")))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let tensors = check_layout(&header.tensors, payload.len())?;

        // the initializer is irrelevant: every tensor is overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = match header.kind {
            ModelKind::Tempcnn => Model::TempCnn(TempCnn::new(header.arch, header.n_classes, &mut rng)?),
            ModelKind::Refed => Model::Refed(RefedModel::new(
                header.arch,
                header.n_classes,
                header.config.tau,
                header.config.normalize_embeddings,
                &mut rng,
            )?),
        };
        let mut seen = 0usize;
        let mut failure: Option<String> = None;
        let mut fill = |name: String, shape: &[usize], dst: &mut [f32]| {
            let Some(e) = tensors.get(name.as_str()) else {
                failure.get_or_insert(format!("tensor {name} missing"));
                return;
            };
            if e.shape != shape || e.bytes != dst.len() * 4 {
                failure.get_or_insert(format!("tensor {name} has shape {:?}, model needs {shape:?}", e.shape));
                return;
            }
            for (d, chunk) in dst
                .iter_mut()
                .zip(payload[e.offset..e.offset + e.bytes].chunks_exact(4))
            {
                *d = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            seen += 1;
        };
        let m = model.module_mut();
        m.visit_params_mut("", &mut |name, p| {
            let shape = p.value.shape.clone();
            fill(name, &shape, &mut p.value.data)
        });
        m.visit_buffers_mut("", &mut |name, b| {
            let shape = [b.len()];
            fill(name, &shape, b)
        });
        if let Some(msg) = failure {
            return Err(bad(msg));
        }
        if seen != tensors.len() {
            return Err(bad(format!("{} tensors in file, model has {seen}", tensors.len())));
        }
        if header.class_names.len() != header.n_classes {
            return Err(bad("class name count differs from n_classes".into()));
        }
        Ok(Self { header, model })
    }

    /// Brings a raw dataset to the scale the model was trained on.
    pub fn prepare(&self, dataset: &LabeledDataset) -> Result<LabeledDataset> {
        if self.header.config.scale {
            scale_own(dataset)
        } else {
            Ok(dataset.clone())
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Entries must be uniquely named, `f32`-aligned, inside the payload and
/// non-overlapping, and together cover it exactly.
fn check_layout(entries: &[TensorEntry], payload_len: usize) -> Result<BTreeMap<&str, &TensorEntry>> {
    let bad = |m: String| Err(Error::Checkpoint(m));
    let mut by_name = BTreeMap::new();
    let mut ranges = Vec::with_capacity(entries.len());
    for e in entries {
        let elems: usize = e.shape.iter().product();
        if e.bytes != elems * 4 || e.offset % 4 != 0 {
            return bad(format!("tensor {} has inconsistent size or alignment", e.name));
        }
        if e.offset.checked_add(e.bytes).is_none_or(|end| end > payload_len) {
            return bad(format!("tensor {} lies outside the payload", e.name));
        }
        if by_name.insert(e.name.as_str(), e).is_some() {
            return bad(format!("tensor {} appears twice", e.name));
        }
        ranges.push((e.offset, e.offset + e.bytes));
    }
    ranges.sort_unstable();
    let mut end = 0;
    for (s, e) in ranges {
        if s < end {
            return bad("tensor byte ranges overlap".into());
        }
        end = e;
    }
    if end != payload_len {
        return bad(format!(
            "payload has {} bytes not covered by any tensor",
            payload_len - end
        ));
    }
    Ok(by_name)
}
