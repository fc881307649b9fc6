//! Training checkpoints: model tensors and batch-norm buffers in a tensor
//! archive, with the resolved run config and schedule state as metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::schedule::LrSchedule;
use crate::archive::TensorArchive;
use crate::model::GazeModel;
use crate::{Error, Result, Scalar};

const CONFIG_KEY: &str = "vitgaze.config";
const STATE_KEY: &str = "vitgaze.state";

/// Where a run stood when a checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: usize,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: GazeModel<T>,
    pub config: RunConfig,
    pub state: TrainState,
}

pub fn to_archive<T: Scalar>(model: &GazeModel<T>, config: &RunConfig, state: &TrainState) -> Result<TensorArchive<T>> {
    let mut archive = TensorArchive::new();
    archive.capture("", model);
    let mut config = config.clone();
    // the backbone may have adopted a foreign grid or register count on load
    config.model = model.config.clone();
    archive.metadata.insert(CONFIG_KEY.into(), config.to_toml()?);
    let state = serde_json::to_string(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    archive.metadata.insert(STATE_KEY.into(), state);
    Ok(archive)
}

pub fn from_archive<T: Scalar>(archive: &TensorArchive<T>) -> Result<Checkpoint<T>> {
    let meta = |key: &str| {
        archive
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` metadata; not a training checkpoint")))
    };
    let config = RunConfig::from_toml_with_overrides(meta(CONFIG_KEY)?, &[])?;
    let state: TrainState = serde_json::from_str(meta(STATE_KEY)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = GazeModel::zeros(config.model.clone())?;
    archive.restore("", &mut model)?;
    model.backbone.mark_loaded();
    Ok(Checkpoint { model, config, state })
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &GazeModel<T>,
    config: &RunConfig,
    state: &TrainState,
) -> Result<()> {
    to_archive(model, config, state)?.write(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    from_archive(&TensorArchive::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_rng;
    use crate::model::ModelConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            guidance_hidden: 4,
            heatmap_channels: vec![4, 2],
            inout_hidden: 4,
            ..ModelConfig::vit_small()
        };
        cfg.model.vit.embed_dim = 8;
        cfg.model.vit.depth = 2;
        cfg.model.vit.num_heads = 2;
        cfg.model.vit.pos_grid = 4;
        cfg.model.vit.capture_layers = vec![1, 2];
        cfg
    }

    #[test]
    fn round_trip_restores_model_config_and_state() {
        let cfg = tiny();
        let mut model = GazeModel::<f64>::init_random(cfg.model.clone(), &mut sample_rng(1, 0)).unwrap();
        model.heatmap_head.groups[0].bn.running_mean.fill(0.25);
        let state = TrainState {
            phase: "train".into(),
            epoch: 3,
            step: 42,
            schedule: LrSchedule::cosine(0.01, 0.001, 0.01, 100),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        save_checkpoint(&path, &model, &cfg, &state).unwrap();
        let back = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.config, cfg);
        assert_eq!(back.state, state);
        assert!(back.model.backbone.is_loaded());
    }

    #[test]
    fn bare_archive_is_not_a_checkpoint() {
        let a = TensorArchive::<f32>::new();
        assert!(matches!(from_archive(&a), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_checkpoint::<f32>("/nonexistent/ck.safetensors").unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Io);
    }
}
