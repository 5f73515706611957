//! Training configuration, its validation and its content hash.

use std::collections::BTreeMap;
use std::path::Path;

use numcore::OptimizerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::maskhead::MaskConfig;
use crate::sab::SabConfig;
use crate::semantics::RegionPartition;
use crate::sfb::SfbConfig;

/// Which branches and heads are built. The global branch is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub mask: bool,
    pub sab: bool,
    pub sfb: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            mask: true,
            sab: true,
            sfb: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the three conv blocks; the last one is `c`.
    pub channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub p: usize,
    pub q: usize,
    /// Evaluate on the test split every this many epochs (and always at the
    /// end of each stage); 0 disables periodic evaluation.
    pub eval_every: usize,
    pub optimizer: OptimizerConfig,
    pub components: Components,
    pub backbone: BackboneConfig,
    pub sab: SabConfig,
    pub sfb: SfbConfig,
    pub mask: MaskConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1_epochs: 46,
            stage2_epochs: 4,
            stage2_lr: 1e-3,
            p: 4,
            q: 4,
            eval_every: 1,
            optimizer: OptimizerConfig::default(),
            components: Components::default(),
            backbone: BackboneConfig::default(),
            sab: SabConfig::default(),
            sfb: SfbConfig::default(),
            mask: MaskConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Parses JSON, filling unspecified keys with defaults, and validates.
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| Error::json(path, e))?;
        cfg.resolved()
    }

    /// Validates and folds `mask.lambda` into `loss.lambda_mask`.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(l) = self.mask.lambda.take() {
            if l != self.loss.lambda_mask && self.loss.lambda_mask != LossWeights::default().lambda_mask {
                return Err(Error::Config(format!(
                    "mask.lambda ({l}) and loss.lambda_mask ({}) disagree",
                    self.loss.lambda_mask
                )));
            }
            self.loss.lambda_mask = l;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.q < 2 {
            return Err(Error::Config("p and q must both be at least 2".into()));
        }
        if !(self.stage2_lr > 0.0) || !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.backbone.channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if (self.components.sab || self.components.sfb) && !self.components.mask {
            return Err(Error::Config(
                "sab and sfb read region masks at inference and need components.mask".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask.threshold) {
            return Err(Error::Config("mask.threshold must lie in [0, 1]".into()));
        }
        self.loss.validate()?;
        self.sab.validate(&RegionPartition::default())?;
        self.sfb.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form (keys sorted).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&sort_keys(self.to_value())).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted keys whose values differ, rendered as `key: old -> new`.
pub fn config_diff(old: &Value, new: &Value) -> Vec<String> {
    let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
    flatten("", old, &mut a);
    flatten("", new, &mut b);
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let show = |v: Option<&Value>| v.map_or("<absent>".to_string(), |v| v.to_string());
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| format!("{k}: {} -> {}", show(a.get(k)), show(b.get(k))))
        .collect()
}
