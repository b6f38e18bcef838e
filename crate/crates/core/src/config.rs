//! Run configuration shared by every training mode. Read from UTF-8 JSON;
//! missing keys take their defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::read_file;
use crate::error::{Error, Result};
use crate::nn::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Refed,
    OnlySource,
    OnlyTarget,
    SourceTarget,
    Finetune,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::OnlySource,
        Method::OnlyTarget,
        Method::SourceTarget,
        Method::Finetune,
        Method::Refed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Refed => "refed",
            Method::OnlySource => "only_source",
            Method::OnlyTarget => "only_target",
            Method::SourceTarget => "source_target",
            Method::Finetune => "finetune",
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Method::Refed => 512,
            _ => 256,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Method,
    pub epochs: usize,
    /// Epochs of the source phase of fine-tuning; the rest fine-tune on
    /// target. Defaults to half of `epochs`.
    pub pretrain_epochs: Option<usize>,
    pub lr: f64,
    /// Defaults to 512 for the two-branch model and 256 otherwise.
    pub batch_size: Option<usize>,
    pub tau: f64,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub normalize_embeddings: bool,
    pub pooling: bool,
    pub seed: u64,
    pub reset_optimizer_between_phases: bool,
    /// Share of source polygons held out to select the source-only epoch.
    pub source_val_fraction: f64,
    /// Percentile-scale every dataset with its own statistics before use.
    pub scale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            mode: Method::Refed,
            epochs: 200,
            pretrain_epochs: None,
            lr: adam.lr,
            batch_size: None,
            tau: 0.07,
            dropout: 0.5,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            normalize_embeddings: true,
            pooling: false,
            seed: 0,
            reset_optimizer_between_phases: true,
            source_val_fraction: 0.2,
            scale: true,
        }
    }
}

impl RunConfig {
    pub fn for_mode(mode: Method) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.mode.default_batch_size())
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        // batch norm needs two values per channel in train mode
        if self.batch_size() < 2 {
            return fail("batch size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("AdamW betas must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("AdamW eps must be positive and weight decay non-negative".into());
        }
        if !(self.source_val_fraction > 0.0 && self.source_val_fraction < 1.0) {
            return fail("source_val_fraction must be in (0, 1)".into());
        }
        if self.mode == Method::Finetune {
            let pre = self.pretrain_epochs();
            if pre == 0 || pre >= self.epochs {
                return fail(format!(
                    "fine-tuning needs both phases non-empty: {pre} of {} epochs on source",
                    self.epochs
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        Self::from_json(&String::from_utf8_lossy(&bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn digest(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.epochs, 200);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.tau, 0.07);
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.batch_size(), 512);
        assert_eq!(RunConfig::for_mode(Method::SourceTarget).batch_size(), 256);
        assert_eq!(RunConfig::for_mode(Method::Finetune).pretrain_epochs(), 100);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"mode": "only_target", "epochs": 3}"#).unwrap();
        assert_eq!(c.mode, Method::OnlyTarget);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.weight_decay, 0.01);
    }

    #[test]
    fn validation_errors() {
        for bad in [
            r#"{"lr": 0}"#,
            r#"{"tau": -1}"#,
            r#"{"dropout": 1.0}"#,
            r#"{"batch_size": 1}"#,
            r#"{"mode": "finetune", "epochs": 4, "pretrain_epochs": 4}"#,
            r#"{"unknown_key": 1}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn digest_is_stable() {
        let a = RunConfig::default();
        assert_eq!(a.digest(), RunConfig::default().digest());
        assert_ne!(a.digest(), RunConfig::for_mode(Method::OnlySource).digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("rf".parse::<Method>().is_err());
    }
}
