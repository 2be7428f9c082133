use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Rate at the first step of the epoch.
    pub lr: f64,
    /// Seconds since the Unix epoch when the epoch finished.
    pub timestamp: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub(crate) fn now(stage: u8, epoch: usize, loss: f64, lr: f64, wall_seconds: f64) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            stage,
            epoch,
            loss,
            lr,
            timestamp,
            wall_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainRunRecord {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            epochs: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn stage_losses(&self, stage: u8) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.stage == stage).map(|e| e.loss).collect()
    }

    /// Index of the first epoch of each stage in the flat epoch list.
    pub fn stage_boundaries(&self) -> [usize; 3] {
        let e = self.config.stage_epochs;
        [0, e[0], e[0] + e[1]]
    }

    pub fn total_wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(e)?).unwrap();
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}
