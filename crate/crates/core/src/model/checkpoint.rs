use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Architecture, ModelParams};
use super::threshold::Threshold;
use super::TrainConfig;
use crate::error::{NestError, Result};
use crate::fsutil;
use crate::preprocess::StatsSidecar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to score raw traces: weights, the fitted preprocessing
/// and the decision cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub d: usize,
    pub blocks: usize,
    pub width: usize,
    pub action_alphabet_size: usize,
    pub params: Vec<f64>,
    pub threshold: Threshold,
    pub best_epoch: usize,
    pub stats: StatsSidecar,
    pub train_config: TrainConfig,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, threshold: Threshold, best_epoch: usize, stats: StatsSidecar, train_config: TrainConfig) -> Self {
        let a = params.arch;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            d: a.d,
            blocks: a.blocks,
            width: a.width,
            action_alphabet_size: a.actions,
            params: params.values.clone(),
            threshold,
            best_epoch,
            stats,
            train_config,
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.d, self.action_alphabet_size, self.blocks, self.width)
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let p = ModelParams {
            arch: self.architecture()?,
            values: self.params.clone(),
        };
        p.check()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| NestError::parse(origin, e))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(NestError::parse(
                origin,
                format!("unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})", c.version),
            ));
        }
        c.model_params().map_err(|e| NestError::parse(origin, e))?;
        if !(c.threshold.tau > 0.0 && c.threshold.tau < 1.0) {
            return Err(NestError::parse(origin, format!("threshold {} outside (0, 1)", c.threshold.tau)));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_string_atomic(path, &self.to_json())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NestError::io(path, e))?;
        Self::from_json(&text, path)
    }
}
