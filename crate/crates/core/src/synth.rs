//! Deterministic two-domain synthetic SITS generator.
//!
//! Every class has a Gaussian-bump phenology profile per band. A pixel of
//! class `k` in band `c` at time `t` is
//! `b + a * exp(-(t - mu)^2 / (2 sigma^2)) + polygon effect + pixel noise`.
//! Source profiles are additionally shifted in time, scaled in amplitude and
//! offset per band. Each polygon draws from its own seeded substream, so the
//! output does not depend on generation order.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, Domain, LabeledDataset, SitsSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandProfile {
    pub baseline: f64,
    pub amplitude: f64,
    pub peak: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Timesteps added to the peak time of source profiles.
    pub dt: f64,
    /// Factor applied to source amplitudes.
    pub amplitude_scale: f64,
    /// Per-band value added to source pixels.
    pub offset: Vec<f64>,
}

impl DomainShift {
    pub fn none(n_bands: usize) -> Self {
        Self {
            dt: 0.0,
            amplitude_scale: 1.0,
            offset: vec![0.0; n_bands],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub t_len: usize,
    pub n_bands: usize,
    pub polygons_per_class: usize,
    /// Polygons per class in the target domain when it differs from the
    /// source.
    #[serde(default)]
    pub target_polygons_per_class: Option<usize>,
    /// Pixels per polygon are `min_pixels + Poisson(mean_pixels - min_pixels)`.
    pub mean_pixels: f64,
    pub min_pixels: usize,
    /// `profiles[k][c]` for class `k`, band `c`.
    pub profiles: Vec<Vec<BandProfile>>,
    pub shift: DomainShift,
    pub sigma_polygon: f64,
    pub sigma_pixel: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_shape(5, 24, 4)
    }
}

impl GeneratorConfig {
    /// Default noise, sizes and shift for the given shape, with the
    /// profiles of [`default_profiles`].
    pub fn with_shape(n_classes: usize, t_len: usize, n_bands: usize) -> Self {
        Self {
            n_classes,
            t_len,
            n_bands,
            polygons_per_class: 60,
            target_polygons_per_class: None,
            mean_pixels: 30.0,
            min_pixels: 10,
            profiles: default_profiles(n_classes, t_len, n_bands),
            shift: DomainShift {
                dt: 2.0,
                amplitude_scale: 1.15,
                offset: vec![0.05; n_bands],
            },
            sigma_polygon: 0.03,
            sigma_pixel: 0.05,
            seed: 0,
        }
    }

    /// The benchmark used for method comparisons: the default shape, profiles
    /// and domain shift, with a scarcer and noisier target so that extra
    /// source data can pay off, and fewer pixels per polygon to keep a
    /// five-repeat comparison within minutes.
    pub fn benchmark() -> Self {
        Self {
            target_polygons_per_class: Some(BENCHMARK_TARGET_POLYGONS),
            mean_pixels: BENCHMARK_MEAN_PIXELS,
            min_pixels: BENCHMARK_MIN_PIXELS,
            sigma_polygon: BENCHMARK_SIGMA,
            sigma_pixel: BENCHMARK_SIGMA,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.t_len == 0 || self.n_bands == 0 {
            return fail("K, T and C must be at least 1".into());
        }
        if self.n_classes > u16::MAX as usize {
            return fail(format!("K = {} does not fit the label type", self.n_classes));
        }
        if self.polygons_per_class == 0 || self.target_polygons_per_class == Some(0) {
            return fail("polygons_per_class must be at least 1".into());
        }
        if self.min_pixels == 0 || !(self.mean_pixels >= self.min_pixels as f64) || !self.mean_pixels.is_finite() {
            return fail("need 1 <= min_pixels <= mean_pixels".into());
        }
        if self.profiles.len() != self.n_classes || self.profiles.iter().any(|p| p.len() != self.n_bands) {
            return fail(format!("profiles must be {} x {}", self.n_classes, self.n_bands));
        }
        for p in self.profiles.iter().flatten() {
            let finite = [p.baseline, p.amplitude, p.peak, p.width].iter().all(|v| v.is_finite());
            if !finite || !(p.width > 0.0) {
                return fail("profile values must be finite with positive width".into());
            }
        }
        let s = &self.shift;
        if s.offset.len() != self.n_bands {
            return fail(format!("shift offset needs {} bands", self.n_bands));
        }
        if !s.dt.is_finite() || s.dt.abs() >= self.t_len as f64 {
            return fail(format!("|dt| must be below T = {}", self.t_len));
        }
        if !s.amplitude_scale.is_finite() || s.offset.iter().any(|v| !v.is_finite()) {
            return fail("shift fields must be finite".into());
        }
        if !(self.sigma_polygon > 0.0 && self.sigma_pixel > 0.0)
            || !self.sigma_polygon.is_finite()
            || !self.sigma_pixel.is_finite()
        {
            return fail("noise levels must be positive".into());
        }
        Ok(())
    }

    /// Parses a possibly partial config. Missing fields take the values of
    /// [`GeneratorConfig::with_shape`] for the given (or default) shape.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(e.to_string());
        let given: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        let serde_json::Value::Object(given) = given else {
            return Err(Error::Config("generator config must be a JSON object".into()));
        };
        let d = Self::default();
        let dim = |key: &str, fallback: usize| -> Result<usize> {
            match given.get(key) {
                None => Ok(fallback),
                Some(v) => v
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer"))),
            }
        };
        let base = Self::with_shape(
            dim("n_classes", d.n_classes)?,
            dim("t_len", d.t_len)?,
            dim("n_bands", d.n_bands)?,
        );
        let serde_json::Value::Object(mut merged) = serde_json::to_value(&base).map_err(bad)? else {
            unreachable!("config serializes to an object")
        };
        merged.extend(given);
        let cfg: GeneratorConfig = serde_json::from_value(serde_json::Value::Object(merged)).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub const BENCHMARK_MEAN_PIXELS: f64 = 6.0;
pub const BENCHMARK_MIN_PIXELS: usize = 3;
pub const BENCHMARK_TARGET_POLYGONS: usize = 20;
pub const BENCHMARK_SIGMA: f64 = 0.15;

/// Profiles whose classes differ mostly in peak timing: peaks are spread
/// evenly over the middle of the season, widths and amplitudes vary a
/// little by class and band, and baselines depend on the band only.
pub fn default_profiles(n_classes: usize, t_len: usize, n_bands: usize) -> Vec<Vec<BandProfile>> {
    let t = t_len as f64;
    let spread = if n_classes > 1 {
        0.6 / (n_classes - 1) as f64
    } else {
        0.0
    };
    (0..n_classes)
        .map(|k| {
            (0..n_bands)
                .map(|c| {
                    let centred = c as f64 - (n_bands as f64 - 1.0) / 2.0;
                    BandProfile {
                        baseline: 0.1 + 0.05 * c as f64,
                        amplitude: 0.3 + 0.2 * ((k * (c + 1)) % 3) as f64,
                        peak: t * (0.2 + spread * k as f64) + 0.5 * centred,
                        width: t / 8.0 * (1.0 + 0.1 * ((k + c) % 3) as f64),
                    }
                })
                .collect()
        })
        .collect()
}

fn polygon_rng(seed: u64, domain: Domain, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain.tag() as u64) << 48) | ((class as u64) << 24) | index as u64);
    rng
}

/// Generates the source and target datasets.
pub fn generate(cfg: &GeneratorConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let names: Vec<String> = (0..cfg.n_classes).map(|k| format!("class_{k}")).collect();
    let mut out = Vec::with_capacity(2);
    for domain in [Domain::Source, Domain::Target] {
        let mut ds = LabeledDataset::new(cfg.t_len, cfg.n_bands, names.clone())?;
        let mut polygon_id = 0u32;
        for (k, profiles) in cfg.profiles.iter().enumerate() {
            let shifted: Vec<BandProfile> = profiles
                .iter()
                .map(|p| match domain {
                    Domain::Source => BandProfile {
                        amplitude: p.amplitude * cfg.shift.amplitude_scale,
                        peak: p.peak + cfg.shift.dt,
                        ..*p
                    },
                    Domain::Target => *p,
                })
                .collect();
            let offset: Vec<f64> = match domain {
                Domain::Source => cfg.shift.offset.clone(),
                Domain::Target => vec![0.0; cfg.n_bands],
            };
            let clean: Vec<f64> = (0..cfg.t_len)
                .flat_map(|t| {
                    shifted.iter().zip(&offset).map(move |(p, o)| {
                        let d = t as f64 - p.peak;
                        p.baseline + p.amplitude * (-d * d / (2.0 * p.width * p.width)).exp() + o
                    })
                })
                .collect();
            let n_polygons = match domain {
                Domain::Source => cfg.polygons_per_class,
                Domain::Target => cfg.target_polygons_per_class.unwrap_or(cfg.polygons_per_class),
            };
            for j in 0..n_polygons {
                let mut rng = polygon_rng(cfg.seed, domain, k, j);
                let extra = cfg.mean_pixels - cfg.min_pixels as f64;
                let n_pix = cfg.min_pixels
                    + if extra > 0.0 {
                        Poisson::new(extra).expect("positive rate").sample(&mut rng) as usize
                    } else {
                        0
                    };
                let poly = Normal::new(0.0, cfg.sigma_polygon).expect("positive sigma");
                let effect: Vec<f64> = (0..cfg.n_bands).map(|_| poly.sample(&mut rng)).collect();
                let pix = Normal::new(0.0, cfg.sigma_pixel).expect("positive sigma");
                for _ in 0..n_pix {
                    let features: Vec<f32> = clean
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| (v + effect[i % cfg.n_bands] + pix.sample(&mut rng)) as f32)
                        .collect();
                    ds.push(SitsSample {
                        features,
                        class_label: k as u16,
                        domain,
                        polygon_id,
                    })?;
                }
                polygon_id += 1;
            }
        }
        out.push(ds);
    }
    let target = out.pop().expect("two domains");
    let source = out.pop().expect("two domains");
    Ok((source, target))
}

/// Sidecar echoing the resolved configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub source_file: String,
    pub target_file: String,
    pub source_samples: usize,
    pub target_samples: usize,
}

pub const SOURCE_FILE: &str = "source.sitsb";
pub const TARGET_FILE: &str = "target.sitsb";
pub const SIDECAR_FILE: &str = "synth.json";

/// Writes `source.sitsb`, `target.sitsb` and `synth.json` into `dir`.
pub fn write_synthetic(cfg: &GeneratorConfig, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (source, target) = generate(cfg)?;
    std::fs::create_dir_all(dir)?;
    let (sp, tp) = (dir.join(SOURCE_FILE), dir.join(TARGET_FILE));
    save_dataset(&source, &sp)?;
    save_dataset(&target, &tp)?;
    let sidecar = SynthSidecar {
        generator: cfg.clone(),
        seed: cfg.seed,
        source_file: SOURCE_FILE.into(),
        target_file: TARGET_FILE.into(),
        source_samples: source.len(),
        target_samples: target.len(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    std::fs::write(dir.join(SIDECAR_FILE), text)?;
    Ok((sp, tp))
}
