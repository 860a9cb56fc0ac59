//! Run manifest: config echo, seed, checkpoint hashes and loss curves.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::train::StageReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: String,
    pub sha256: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Config of the most recent stage, keyed by stage kind.
    pub config: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, CheckpointRecord>,
    pub metric_history: BTreeMap<String, Vec<f64>>,
}

impl RunManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            config: BTreeMap::new(),
            seed,
            checkpoints: BTreeMap::new(),
            metric_history: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad manifest {}: {e}", path.display())))
    }

    pub fn load_or_new(path: &Path, seed: u64) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new(seed))
        }
    }

    pub fn record(&mut self, cfg: &PipelineConfig, report: &StageReport) {
        self.seed = cfg.train.seed;
        self.config.insert(report.kind.clone(), cfg.to_json());
        self.checkpoints.insert(
            report.kind.clone(),
            CheckpointRecord {
                path: report.checkpoint.display().to_string(),
                sha256: report.sha256.clone(),
                steps: report.steps,
            },
        );
        self.metric_history
            .insert(format!("{}.loss", report.kind), report.losses.clone());
        self.metric_history.insert(
            format!("{}.probe", report.kind),
            vec![report.probe_initial, report.probe_final],
        );
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain data");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
