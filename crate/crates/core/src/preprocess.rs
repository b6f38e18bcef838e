//! Gap-filling, percentile scaling and polygon-aware stratified splitting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_file, LabeledDataset};
use crate::error::{Error, Result};

/// Fills invalid entries of a regularly sampled series. Interior gaps are
/// linearly interpolated between the nearest valid neighbours, leading and
/// trailing gaps copy the nearest valid value.
pub fn gapfill(series: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if series.len() != valid.len() {
        return Err(Error::Shape(format!(
            "series length {} != mask length {}",
            series.len(),
            valid.len()
        )));
    }
    let valid_idx: Vec<usize> = (0..series.len()).filter(|&t| valid[t]).collect();
    let (&first, &last) = match (valid_idx.first(), valid_idx.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::UnrecoverableGap),
    };
    let mut out = series.to_vec();
    for v in &mut out[..first] {
        *v = series[first];
    }
    for v in &mut out[last + 1..] {
        *v = series[last];
    }
    for w in valid_idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        let span = (b - a) as f64;
        for (t, v) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let frac = (t - a) as f64 / span;
            *v = series[a] + frac * (series[b] - series[a]);
        }
    }
    Ok(out)
}

/// Linearly interpolated percentile of already sorted values, rank `q * (M - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per-band min/max used for scaling, taken as the 2nd and 98th percentiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub const LOWER_PERCENTILE: f64 = 0.02;
pub const UPPER_PERCENTILE: f64 = 0.98;

pub fn fit_scaling(dataset: &LabeledDataset) -> Result<ScalingParams> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot fit scaling on an empty dataset".into()));
    }
    let c = dataset.n_bands();
    let mut per_band: Vec<Vec<f64>> = vec![Vec::with_capacity(dataset.len() * dataset.t_len()); c];
    for (i, &v) in dataset.all_features().iter().enumerate() {
        per_band[i % c].push(v as f64);
    }
    let mut lower = Vec::with_capacity(c);
    let mut upper = Vec::with_capacity(c);
    for mut vals in per_band {
        vals.sort_by(f64::total_cmp);
        lower.push(percentile_sorted(&vals, LOWER_PERCENTILE));
        upper.push(percentile_sorted(&vals, UPPER_PERCENTILE));
    }
    Ok(ScalingParams { lower, upper })
}

impl ScalingParams {
    pub fn scale_value(&self, band: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lower[band], self.upper[band]);
        if hi <= lo {
            return 0.0;
        }
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

pub fn apply_scaling(dataset: &LabeledDataset, params: &ScalingParams) -> Result<LabeledDataset> {
    let c = dataset.n_bands();
    if params.lower.len() != c || params.upper.len() != c {
        return Err(Error::Shape(format!(
            "scaling has {} bands, dataset has {c}",
            params.lower.len()
        )));
    }
    let mut out = dataset.clone();
    for (i, v) in out.all_features_mut().iter_mut().enumerate() {
        *v = params.scale_value(i % c, *v as f64) as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Validation,
    #[serde(rename = "test")]
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    fn from_index(i: usize) -> Partition {
        Partition::ALL[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl PartitionFractions {
    fn from_slice(v: &[f64]) -> Self {
        Self {
            train: v[0],
            val: v[1],
            test: v[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AchievedFractions {
    pub overall: PartitionFractions,
    /// Indexed by class label; `None` for classes absent from the dataset.
    pub per_class: Vec<Option<PartitionFractions>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignment: BTreeMap<u32, Partition>,
    pub achieved: AchievedFractions,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn partition_of(&self, polygon_id: u32) -> Option<Partition> {
        self.assignment.get(&polygon_id).copied()
    }

    /// Sample indices of `dataset` falling in `part`. Fails if a polygon of
    /// the dataset is not covered by the assignment.
    pub fn indices(&self, dataset: &LabeledDataset, part: Partition) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, &pid) in dataset.polygon_ids().iter().enumerate() {
            match self.partition_of(pid) {
                Some(p) if p == part => out.push(i),
                Some(_) => {}
                None => {
                    return Err(Error::InvalidInput(format!(
                        "polygon {pid} is not covered by the split"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn subset(&self, dataset: &LabeledDataset, part: Partition) -> Result<LabeledDataset> {
        Ok(dataset.subset(&self.indices(dataset, part)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(text: &str) -> Result<SplitAssignment> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SplitAssignment> {
        let bytes = read_file(path.as_ref())?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 0.2, 0.3];

#[derive(Debug, Clone)]
struct PolygonInfo {
    id: u32,
    pixels: usize,
    class: usize,
}

fn polygon_table(dataset: &LabeledDataset) -> Vec<PolygonInfo> {
    // polygon id -> per-class pixel counts
    let k = dataset.n_classes();
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (&pid, &label) in dataset.polygon_ids().iter().zip(dataset.labels()) {
        counts.entry(pid).or_insert_with(|| vec![0; k])[label as usize] += 1;
    }
    counts
        .into_iter()
        .map(|(id, per_class)| {
            let pixels = per_class.iter().sum();
            // majority class, ties to the smaller label
            let class = per_class
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap_or(0);
            PolygonInfo { id, pixels, class }
        })
        .collect()
}

/// Greedy per-class assignment of whole polygons to partitions. Returns the
/// partition index of every polygon, plus warnings for under-populated classes.
pub(crate) fn assign_polygons(
    dataset: &LabeledDataset,
    ratios: &[f64],
    seed: u64,
) -> Result<(BTreeMap<u32, usize>, Vec<String>)> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidInput("split ratios must be positive".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split ratios sum to {sum}, not 1")));
    }
    let polygons = polygon_table(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for class in 0..dataset.n_classes() {
        let mut members: Vec<&PolygonInfo> = polygons.iter().filter(|p| p.class == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < ratios.len() {
            warnings.push(format!(
                "class {class} has {} polygons for {} partitions; some partitions will miss it",
                members.len(),
                ratios.len()
            ));
        }
        members.shuffle(&mut rng);
        let total: usize = members.iter().map(|p| p.pixels).sum();
        let mut assigned = vec![0usize; ratios.len()];
        for poly in members {
            let mut best = 0;
            let mut best_deficit = f64::NEG_INFINITY;
            for (j, &r) in ratios.iter().enumerate() {
                let deficit = r * total as f64 - assigned[j] as f64;
                if deficit > best_deficit {
                    best = j;
                    best_deficit = deficit;
                }
            }
            assigned[best] += poly.pixels;
            out.insert(poly.id, best);
        }
    }
    Ok((out, warnings))
}

/// Train/validation/test split at polygon granularity, stratified by class.
pub fn polygon_split(dataset: &LabeledDataset, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let (parts, warnings) = assign_polygons(dataset, &ratios, seed)?;
    let assignment: BTreeMap<u32, Partition> = parts.iter().map(|(&id, &p)| (id, Partition::from_index(p))).collect();

    let k = dataset.n_classes();
    let mut per_class = vec![[0usize; 3]; k];
    let mut overall = [0usize; 3];
    for (&pid, &label) in dataset.polygon_ids().iter().zip(dataset.labels()) {
        let p = parts[&pid];
        per_class[label as usize][p] += 1;
        overall[p] += 1;
    }
    let frac = |c: &[usize; 3]| {
        let n: usize = c.iter().sum();
        (n > 0).then(|| PartitionFractions::from_slice(&c.map(|v| v as f64 / n as f64)))
    };
    Ok(SplitAssignment {
        seed,
        ratios,
        assignment,
        achieved: AchievedFractions {
            overall: frac(&overall).unwrap_or(PartitionFractions::from_slice(&[0.0; 3])),
            per_class: per_class.iter().map(frac).collect(),
        },
        warnings,
    })
}
