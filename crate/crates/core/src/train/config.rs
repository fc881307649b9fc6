//! Run configuration: one TOML document with model, optimisation, data and
//! augmentation sections, plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub schedule: ScheduleKind,
    pub weight_decay: f64,
    /// Adam β1.
    pub momentum_decay: f64,
    /// Adam β2.
    pub variance_decay: f64,
    pub epsilon: f64,
    pub layerwise_decay: f64,
    /// Fraction of all iterations spent in linear warmup.
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_resolution: usize,
    /// Input side length used for the last epoch.
    pub final_epoch_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            final_lr: 0.001,
            schedule: ScheduleKind::Cosine,
            weight_decay: 0.1,
            momentum_decay: 0.9,
            variance_decay: 0.99,
            epsilon: 1e-8,
            layerwise_decay: 0.65,
            warmup_ratio: 0.01,
            epochs: 15,
            batch_size: 48,
            base_resolution: 224,
            final_epoch_resolution: 518,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl TrainConfig {
    pub fn validate(&self, patch: usize) -> Result<()> {
        check(self.base_lr > 0.0 && self.final_lr > 0.0, || "learning rates must be positive".into())?;
        check(self.weight_decay >= 0.0, || "weight_decay must be non-negative".into())?;
        for (name, b) in [("momentum_decay", self.momentum_decay), ("variance_decay", self.variance_decay)] {
            check((0.0..1.0).contains(&b), || format!("{name} must lie in [0, 1), got {b}"))?;
        }
        check(self.epsilon > 0.0, || "epsilon must be positive".into())?;
        check(self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0, || {
            format!("layerwise_decay must lie in (0, 1], got {}", self.layerwise_decay)
        })?;
        check((0.0..1.0).contains(&self.warmup_ratio), || "warmup_ratio must lie in [0, 1)".into())?;
        check(self.epochs >= 1, || "epochs must be at least 1".into())?;
        check(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        for r in [self.base_resolution, self.final_epoch_resolution] {
            check(r > 0 && r % patch == 0, || {
                format!("resolution {r} is not a positive multiple of the patch size {patch}")
            })?;
        }
        Ok(())
    }

    /// Input resolution for a 0-indexed epoch out of `epochs`.
    pub fn resolution_for_epoch(&self, epoch: usize, epochs: usize) -> usize {
        if epoch + 1 == epochs {
            self.final_epoch_resolution
        } else {
            self.base_resolution
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Constant learning rate.
    pub lr: f64,
    pub epochs: usize,
    /// Checkpoint the fine-tuning run starts from.
    pub init: Option<PathBuf>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 1,
            init: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.lr > 0.0, || "finetune.lr must be positive".into())?;
        check(self.epochs >= 1, || "finetune.epochs must be at least 1".into())
    }
}

/// Which metric family `evaluate` reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStyle {
    /// Video style when any sample is labelled outside, else GazeFollow.
    Auto,
    /// AUC, min and average distance.
    Gazefollow,
    /// AUC, distance and in/out AP.
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory manifest image paths are relative to; defaults to the
    /// manifest's own directory.
    pub image_root: Option<PathBuf>,
    /// Pre-trained backbone archive in the DINOv2 naming layout.
    pub backbone_weights: Option<PathBuf>,
    /// Name prefix of the backbone tensors inside that archive.
    pub backbone_prefix: String,
    pub eval_style: EvalStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_root: None,
            backbone_weights: None,
            backbone_prefix: String::new(),
            eval_style: EvalStyle::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::vit_small(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
        }
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `section.key = value` inside a TOML table, creating sections on the way.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let mut table = root;
    for seg in &path[..path.len() - 1] {
        let entry = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{seg}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_override_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Build from TOML text and overrides; unknown keys anywhere are rejected.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.vit.patch_size)?;
        self.finetune.validate()?;
        self.augment.validate()?;
        self.loss.validate()
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_with_overrides("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 48);
        assert_eq!(cfg.finetune.lr, 1e-4);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = vec![
            "train.base_lr=0.02".to_string(),
            "model.vit.depth = 4".to_string(),
            "model.vit.capture_layers = [2, 4]".to_string(),
            "data.eval_style=video".to_string(),
            "seed=7".to_string(),
        ];
        let cfg = RunConfig::from_toml_with_overrides("[train]\nepochs = 3\n", &o).unwrap();
        assert_eq!(cfg.train.base_lr, 0.02);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.vit.depth, 4);
        assert_eq!(cfg.model.vit.capture_layers, vec![2, 4]);
        assert_eq!(cfg.data.eval_style, EvalStyle::Video);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.base_lrr=0.1", "nonsense=1", "model.vit.width=3"] {
            let err = RunConfig::from_toml_with_overrides("", &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
        assert!(RunConfig::from_toml_with_overrides("[trian]\n", &[]).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["novalue".to_string()]).is_err());
    }

    #[test]
    fn resolution_must_tile_into_patches() {
        let err = RunConfig::from_toml_with_overrides("", &["train.base_resolution=225".into()]).unwrap_err();
        assert!(err.to_string().contains("225"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_toml_with_overrides("", &["finetune.init=\"a/b.safetensors\"".into()]).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_with_overrides(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn last_epoch_switches_resolution() {
        let t = TrainConfig::default();
        assert_eq!(t.resolution_for_epoch(0, 15), 224);
        assert_eq!(t.resolution_for_epoch(13, 15), 224);
        assert_eq!(t.resolution_for_epoch(14, 15), 518);
        assert_eq!(518 / 14, 37);
    }
}
