use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainConfig, TrainError};
use crate::models::{init_params, ModelConfig, ModelKind, ParameterSet};
use crate::pbpk::{ConcentrationTensor, DatasetSplit, NormMode, NormStats};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Trained parameters with everything needed to evaluate them against a
/// dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub norm: NormStats,
    pub params: ParameterSet,
    pub split: DatasetSplit,
    pub dataset_seed: u64,
    pub organs: Vec<String>,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    pub epochs_trained: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub run_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    norm: NormStats,
    split: DatasetSplit,
    dataset_seed: u64,
    organs: Vec<String>,
    epoch: usize,
    epochs_trained: usize,
    metrics: CheckpointMetrics,
    rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
    parameters: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMetrics {
    best_val_loss: Option<f64>,
    final_train_loss: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl ModelCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            schema_version: self.schema_version,
            model: self.model.clone(),
            train: self.train.clone(),
            norm: self.norm.clone(),
            split: self.split.clone(),
            dataset_seed: self.dataset_seed,
            organs: self.organs.clone(),
            epoch: self.epoch,
            epochs_trained: self.epochs_trained,
            metrics: CheckpointMetrics {
                best_val_loss: finite(self.best_val_loss),
                final_train_loss: finite(self.final_train_loss),
            },
            rng_seed: self.params.seed,
            run_config: self.run_config.clone(),
            parameters: self.params.to_entries_json(),
        };
        serde_json::to_string(&file).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        let params = ParameterSet::from_entries_json(file.parameters, file.rng_seed)?;
        params.check(&file.model)?;
        Ok(Self {
            schema_version: file.schema_version,
            model: file.model,
            train: file.train,
            norm: file.norm,
            params,
            split: file.split,
            dataset_seed: file.dataset_seed,
            organs: file.organs,
            epoch: file.epoch,
            epochs_trained: file.epochs_trained,
            best_val_loss: file.metrics.best_val_loss.unwrap_or(f64::NAN),
            final_train_loss: file.metrics.final_train_loss.unwrap_or(f64::NAN),
            run_config: file.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// A graph-model checkpoint whose readout is zero, so every prediction
    /// is the last observed concentration.
    pub fn persistence(data: &ConcentrationTensor, split: &DatasetSplit, norm_mode: NormMode) -> Result<Self> {
        let model = ModelConfig::new(ModelKind::Gnn, data.n_organs());
        let train = TrainConfig {
            norm_mode,
            ..TrainConfig::default()
        };
        let mut params = init_params(&model, train.seed)?;
        let names: Vec<String> = params.names().filter(|n| n.starts_with("readout.")).cloned().collect();
        for name in names {
            let shape = params.get(&name).expect("listed").shape().to_vec();
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            norm: NormStats::fit(data, &split.train, norm_mode)?,
            model,
            train,
            params,
            split: split.clone(),
            dataset_seed: data.seed,
            organs: data.organ_names(),
            epoch: 0,
            epochs_trained: 0,
            best_val_loss: f64::NAN,
            final_train_loss: f64::NAN,
            run_config: None,
        })
    }
}
