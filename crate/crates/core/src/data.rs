//! Samples, datasets, the mixed contrastive label space and the SITSB v1
//! on-disk format.
//!
//! A dataset is stored column-wise: features are one flat `f32` buffer laid
//! out sample-major, then time, then band, so the features of sample `i`
//! occupy `[i*T*C, (i+1)*T*C)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const SITSB_MAGIC: &[u8; 8] = b"SITSB001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Domain> {
        match tag {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Which branch produced a feature vector in the contrastive batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Invariant,
    Specific,
}

/// Index into the 3K-way label space used by the contrastive loss:
/// `[0, K)` invariant, `[K, 2K)` source-specific, `[2K, 3K)` target-specific.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MixedLabel(pub usize);

impl MixedLabel {
    pub fn index(self) -> usize {
        self.0
    }
}

pub fn mixed_label(class_label: usize, n_classes: usize, kind: FeatureKind, domain: Domain) -> Result<MixedLabel> {
    if class_label >= n_classes {
        return Err(Error::OutOfRange(format!(
            "class label {class_label} >= K = {n_classes}"
        )));
    }
    let idx = match (kind, domain) {
        (FeatureKind::Invariant, _) => class_label,
        (FeatureKind::Specific, Domain::Source) => n_classes + class_label,
        (FeatureKind::Specific, Domain::Target) => 2 * n_classes + class_label,
    };
    Ok(MixedLabel(idx))
}

/// One pixel's time series with its labels. `features` is `T x C`, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SitsSample {
    pub features: Vec<f32>,
    pub class_label: u16,
    pub domain: Domain,
    pub polygon_id: u32,
}

/// Shape metadata shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub t_len: usize,
    pub n_bands: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    t_len: usize,
    n_bands: usize,
    n_classes: usize,
    class_names: Vec<String>,
    features: Vec<f32>,
    labels: Vec<u16>,
    polygon_ids: Vec<u32>,
    domains: Vec<Domain>,
}

impl LabeledDataset {
    pub fn new(t_len: usize, n_bands: usize, class_names: Vec<String>) -> Result<Self> {
        if t_len == 0 || n_bands == 0 || class_names.is_empty() {
            return Err(Error::InvalidInput("T, C and K must all be at least 1".into()));
        }
        if class_names.len() > u16::MAX as usize {
            return Err(Error::InvalidInput("too many classes for u16 labels".into()));
        }
        Ok(Self {
            t_len,
            n_bands,
            n_classes: class_names.len(),
            class_names,
            features: Vec::new(),
            labels: Vec::new(),
            polygon_ids: Vec::new(),
            domains: Vec::new(),
        })
    }

    pub fn from_samples(
        t_len: usize,
        n_bands: usize,
        class_names: Vec<String>,
        samples: impl IntoIterator<Item = SitsSample>,
    ) -> Result<Self> {
        let mut ds = Self::new(t_len, n_bands, class_names)?;
        for s in samples {
            ds.push(s)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, sample: SitsSample) -> Result<()> {
        if sample.features.len() != self.t_len * self.n_bands {
            return Err(Error::Shape(format!(
                "sample has {} feature values, expected T*C = {}",
                sample.features.len(),
                self.t_len * self.n_bands
            )));
        }
        if sample.class_label as usize >= self.n_classes {
            return Err(Error::OutOfRange(format!(
                "class label {} >= K = {}",
                sample.class_label, self.n_classes
            )));
        }
        if sample.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample construction".into()));
        }
        self.features.extend_from_slice(&sample.features);
        self.labels.push(sample.class_label);
        self.polygon_ids.push(sample.polygon_id);
        self.domains.push(sample.domain);
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            t_len: self.t_len,
            n_bands: self.n_bands,
            n_classes: self.n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn features(&self, i: usize) -> &[f32] {
        let w = self.t_len * self.n_bands;
        &self.features[i * w..(i + 1) * w]
    }

    pub fn all_features(&self) -> &[f32] {
        &self.features
    }

    pub(crate) fn all_features_mut(&mut self) -> &mut [f32] {
        &mut self.features
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn polygon_ids(&self) -> &[u32] {
        &self.polygon_ids
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn sample(&self, i: usize) -> SitsSample {
        SitsSample {
            features: self.features(i).to_vec(),
            class_label: self.labels[i],
            domain: self.domains[i],
            polygon_id: self.polygon_ids[i],
        }
    }

    pub fn count_domain(&self, domain: Domain) -> usize {
        self.domains.iter().filter(|&&d| d == domain).count()
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let w = self.t_len * self.n_bands;
        let mut features = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        LabeledDataset {
            t_len: self.t_len,
            n_bands: self.n_bands,
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            polygon_ids: indices.iter().map(|&i| self.polygon_ids[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
        }
    }

    /// Concatenation of two datasets with equal metadata.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        check_compatible(&self.meta(), &other.meta())?;
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        out.polygon_ids.extend_from_slice(&other.polygon_ids);
        out.domains.extend_from_slice(&other.domains);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(28 + n * (self.t_len * self.n_bands * 4 + 7));
        out.extend_from_slice(SITSB_MAGIC);
        for v in [n, self.t_len, self.n_bands, self.n_classes, 0] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for name in &self.class_names {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.polygon_ids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.domains.iter().map(|d| d.tag()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<LabeledDataset, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != SITSB_MAGIC {
            return Err(FormatError::BadMagic {
                offset: 0,
                expected: String::from_utf8_lossy(SITSB_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let n = r.u32("header N")? as usize;
        let t_len = r.u32("header T")? as usize;
        let n_bands = r.u32("header C")? as usize;
        let n_classes = r.u32("header K")? as usize;
        let reserved_at = r.pos;
        if r.u32("header reserved")? != 0 {
            return Err(FormatError::Reserved { offset: reserved_at });
        }
        let mut class_names = Vec::with_capacity(n_classes.min(1 << 16));
        for _ in 0..n_classes {
            let len = r.u16("class name length")? as usize;
            let at = r.pos;
            let raw = r.take(len, "class name")?;
            let name = std::str::from_utf8(raw).map_err(|_| FormatError::BadClassName { offset: at })?;
            class_names.push(name.to_owned());
        }
        let n_feat = n
            .checked_mul(t_len)
            .and_then(|v| v.checked_mul(n_bands))
            .ok_or(FormatError::Truncated {
                offset: r.pos,
                what: "features",
                needed: usize::MAX,
                available: bytes.len() - r.pos,
            })?;
        let feat_at = r.pos;
        let raw = r.take_n(n_feat, 4, "features")?;
        let mut features = Vec::with_capacity(n_feat);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    offset: feat_at + 4 * i,
                });
            }
            features.push(v);
        }
        let label_at = r.pos;
        let raw = r.take_n(n, 2, "class labels")?;
        let mut labels = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(2).enumerate() {
            let label = u16::from_le_bytes(chunk.try_into().unwrap());
            if label as usize >= n_classes {
                return Err(FormatError::LabelOutOfRange {
                    offset: label_at + 2 * i,
                    label,
                    n_classes,
                });
            }
            labels.push(label);
        }
        let raw = r.take_n(n, 4, "polygon ids")?;
        let polygon_ids = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let dom_at = r.pos;
        let raw = r.take_n(n, 1, "domain tags")?;
        let mut domains = Vec::with_capacity(n);
        for (i, &tag) in raw.iter().enumerate() {
            domains.push(Domain::from_tag(tag).ok_or(FormatError::BadDomainTag {
                offset: dom_at + i,
                tag,
            })?);
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes {
                offset: r.pos,
                trailing: bytes.len() - r.pos,
            });
        }
        Ok(LabeledDataset {
            t_len,
            n_bands,
            n_classes,
            class_names,
            features,
            labels,
            polygon_ids,
            domains,
        })
    }
}

/// Read access to labeled samples. Training routines pull every sample
/// they use through [`SampleSource::read`], so instrumented implementations
/// can verify which data a strategy consumes.
pub trait SampleSource {
    fn meta(&self) -> DatasetMeta;
    fn len(&self) -> usize;
    fn read(&self, indices: &[usize]) -> LabeledDataset;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read_all(&self) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.read(&idx)
    }
}

impl SampleSource for LabeledDataset {
    fn meta(&self) -> DatasetMeta {
        LabeledDataset::meta(self)
    }

    fn len(&self) -> usize {
        LabeledDataset::len(self)
    }

    fn read(&self, indices: &[usize]) -> LabeledDataset {
        self.subset(indices)
    }
}

pub fn check_compatible(a: &DatasetMeta, b: &DatasetMeta) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "dataset metadata differs: (T={}, C={}, K={}) vs (T={}, C={}, K={})",
            a.t_len, a.n_bands, a.n_classes, b.t_len, b.n_bands, b.n_classes
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                what,
                needed: len,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn take_n(&mut self, count: usize, width: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        let len = count.checked_mul(width).ok_or(FormatError::Truncated {
            offset: self.pos,
            what,
            needed: usize::MAX,
            available: self.bytes.len() - self.pos,
        })?;
        self.take(len, what)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = read_file(path.as_ref())?;
    Ok(LabeledDataset::from_bytes(&bytes)?)
}

pub fn save_dataset(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny() -> LabeledDataset {
        let names = vec!["a".to_string(), "bé".to_string()];
        let samples = (0..10).map(|i| SitsSample {
            features: (0..6).map(|j| (i * 6 + j) as f32 * 0.25).collect(),
            class_label: (i % 2) as u16,
            domain: if i < 4 { Domain::Source } else { Domain::Target },
            polygon_id: (i / 3) as u32,
        });
        LabeledDataset::from_samples(3, 2, names, samples).unwrap()
    }

    #[test]
    fn mixed_label_partition() {
        let k = 8;
        assert_eq!(
            mixed_label(0, k, FeatureKind::Invariant, Domain::Target).unwrap(),
            MixedLabel(0)
        );
        assert_eq!(
            mixed_label(7, k, FeatureKind::Specific, Domain::Source).unwrap(),
            MixedLabel(15)
        );
        assert_eq!(
            mixed_label(7, k, FeatureKind::Specific, Domain::Target).unwrap(),
            MixedLabel(23)
        );
        assert!(mixed_label(8, k, FeatureKind::Invariant, Domain::Source).is_err());

        let mut seen = HashSet::new();
        for c in 0..k {
            seen.insert(mixed_label(c, k, FeatureKind::Invariant, Domain::Source).unwrap());
            for d in [Domain::Source, Domain::Target] {
                seen.insert(mixed_label(c, k, FeatureKind::Specific, d).unwrap());
            }
        }
        assert_eq!(seen.len(), 24);
        assert!(seen.iter().all(|m| m.0 < 24));
    }

    #[test]
    fn domain_counts_partition_dataset() {
        let ds = tiny();
        assert_eq!(ds.count_domain(Domain::Source), 4);
        assert_eq!(
            ds.count_domain(Domain::Source) + ds.count_domain(Domain::Target),
            ds.len()
        );
    }

    #[test]
    fn bytes_round_trip() {
        let ds = tiny();
        let bytes = ds.to_bytes();
        let back = LabeledDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = tiny().to_bytes();
        bytes[..8].copy_from_slice(b"XXXX0001");
        assert!(matches!(
            LabeledDataset::from_bytes(&bytes),
            Err(FormatError::BadMagic { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_labels() {
        // header claims N=10 but only 9 labels follow
        let ds = tiny();
        let bytes = ds.to_bytes();
        let label_start = 28 + (2 + 1) + (2 + 3) + 10 * 6 * 4;
        let cut = &bytes[..label_start + 9 * 2];
        match LabeledDataset::from_bytes(cut) {
            Err(FormatError::Truncated { offset, what, .. }) => {
                assert_eq!(offset, label_start);
                assert_eq!(what, "class labels");
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_names_offset() {
        let ds = tiny();
        let mut bytes = ds.to_bytes();
        let label_start = 28 + 3 + 5 + 10 * 6 * 4;
        bytes[label_start + 2 * 3] = 2;
        match LabeledDataset::from_bytes(&bytes) {
            Err(FormatError::LabelOutOfRange { offset, label: 2, .. }) => {
                assert_eq!(offset, label_start + 6)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_feature_names_offset() {
        let ds = tiny();
        let mut bytes = ds.to_bytes();
        let feat_start = 28 + 3 + 5;
        bytes[feat_start + 8..feat_start + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(
            LabeledDataset::from_bytes(&bytes),
            Err(FormatError::NonFinite { offset: feat_start + 8 })
        );
    }

    #[test]
    fn push_validates() {
        let mut ds = LabeledDataset::new(2, 1, vec!["x".into()]).unwrap();
        let bad = SitsSample {
            features: vec![1.0],
            class_label: 0,
            domain: Domain::Source,
            polygon_id: 0,
        };
        assert!(ds.push(bad).is_err());
        let bad_label = SitsSample {
            features: vec![1.0, 2.0],
            class_label: 1,
            domain: Domain::Source,
            polygon_id: 0,
        };
        assert!(ds.push(bad_label).is_err());
    }

    #[test]
    fn subset_and_concat() {
        let ds = tiny();
        let sub = ds.subset(&[9, 0]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.features(0), ds.features(9));
        let both = sub.concat(&ds).unwrap();
        assert_eq!(both.len(), 12);
        assert_eq!(both.sample(2), ds.sample(0));
    }
}
