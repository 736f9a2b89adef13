//! Experiment configuration: one JSON document describing a full run.
//!
//! Serialization is field-order stable and floats round-trip exactly, so
//! serialize -> parse -> serialize is byte-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::routing::{BudgetConfig, RoutingStrategy};
use crate::train::{TrainConfig, DEFAULT_AUX_LOSS_COEFFICIENT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub aux_loss_coefficient: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategy: RoutingStrategy,
    pub budget: BudgetConfig,
    pub model: ModelDims,
    pub train: TrainSpec,
    pub task: TaskSpec,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: RoutingStrategy::SeqTopKBounded,
            budget: BudgetConfig {
                k_tok: 2,
                lower_bound: 1,
                upper_bound: 4,
            },
            model: ModelDims {
                d_model: 12,
                d_hidden: 24,
                n_experts: 8,
                n_layers: 1,
                vocab: 8,
            },
            train: TrainSpec {
                steps: 300,
                learning_rate: 0.08,
                batch_size: 6,
                aux_loss_coefficient: DEFAULT_AUX_LOSS_COEFFICIENT,
                seed: 11,
            },
            task: TaskSpec {
                seed: 11,
                seq_len: 12,
            },
            output_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.budget.validate(self.model.n_experts)?;
        self.to_train_config().validate(self.model.n_experts)?;
        if self.task.seq_len < 2 {
            return Err(Error::InvalidInput("task seq_len must be >= 2".into()));
        }
        if self.model.d_model < self.model.vocab + 1 {
            return Err(Error::InvalidInput(
                "d_model must be at least vocab + 1 for the synthetic task".into(),
            ));
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            aux_loss_coefficient: self.train.aux_loss_coefficient,
            strategy: self.strategy,
            budget: self.budget,
            seed: self.train.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
