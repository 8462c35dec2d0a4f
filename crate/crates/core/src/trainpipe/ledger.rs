use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::ConfusionMatrix;
use crate::error::{Error, Result};

/// Losses and schedule state after one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub batch: u64,
    pub l_con: f64,
    /// Empty when the categorical branch is off.
    pub l_cat: Option<f64>,
    pub l_total: f64,
    pub temperature: f64,
    pub lr: f64,
    /// Columns of the categorical logit matrix (0 without the branch).
    pub label_columns: usize,
    /// Distinct classes present in the batch.
    pub batch_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Append-only record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config: TrainConfig,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub confusion: Option<ConfusionMatrix>,
    pub wall_clock_secs: f64,
}

impl RunLedger {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            seed: config.seed,
            config,
            steps: Vec::new(),
            epochs: Vec::new(),
            confusion: None,
            wall_clock_secs: 0.0,
        }
    }

    /// Per-step CSV. Contains no timing, so equal runs give equal bytes.
    pub fn steps_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.steps {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn epochs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn summary_json(&self) -> String {
        let final_test = self.confusion.as_ref().map(ConfusionMatrix::accuracy);
        let summary = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "steps": self.steps.len(),
            "final_loss": self.steps.last().map(|s| s.l_total),
            "test_accuracy": final_test,
            "epochs": self.epochs,
            "confusion": self.confusion,
            "wall_clock_secs": self.wall_clock_secs,
        });
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"
    }

    /// Writes `ledger.csv`, `epochs.csv`, `summary.json` and, when
    /// available, `confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        put("ledger.csv", self.steps_csv())?;
        put("epochs.csv", self.epochs_csv())?;
        put("summary.json", self.summary_json())?;
        if let Some(c) = &self.confusion {
            put("confusion.csv", c.to_csv())?;
        }
        Ok(())
    }
}
