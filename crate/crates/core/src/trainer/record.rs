use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Metrics, TrainConfig};
use crate::longtail_data::ClassSplit;
use crate::model::LossBreakdown;

/// Version tag of the results file.
pub const RUN_FORMAT: &str = "lcreg-run/1";

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub stage: u8,
    pub iteration: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss: LossBreakdown,
}

/// Validation metrics recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub stage: u8,
    pub iteration: usize,
    pub metrics: Metrics,
}

/// Results file of one run. `wall_time_secs` and `timestamp` are the only
/// fields that differ between reruns of the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Cache key of the dataset the run used.
    pub dataset: Option<String>,
    pub split: ClassSplit,
    pub stage1_metrics: Metrics,
    pub final_metrics: Metrics,
    pub evals: Vec<EvalPoint>,
    pub loss_trace: Vec<LossPoint>,
    /// Observations per latent category at the end of stage 1.
    pub latent_counts: Vec<u64>,
    pub wall_time_secs: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    /// Line-delimited JSON log: one line per loss point, one per evaluation,
    /// then the final metrics.
    pub fn log_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for p in &self.loss_trace {
            lines.push(serde_json::json!({"event": "loss", "label": self.label, "seed": self.seed, "point": p}).to_string());
        }
        for e in &self.evals {
            lines.push(serde_json::json!({"event": "eval", "label": self.label, "seed": self.seed, "point": e}).to_string());
        }
        lines.push(
            serde_json::json!({
                "event": "final",
                "label": self.label,
                "seed": self.seed,
                "config_hash": self.config_hash,
                "metrics": self.final_metrics,
            })
            .to_string(),
        );
        lines
    }

    /// Copy with the run-to-run varying fields cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            timestamp: 0,
            ..self.clone()
        }
    }
}

/// First 16 hex digits of the SHA-256 of the configuration with its seed
/// cleared, so runs differing only by seed share a hash.
pub fn config_hash(config: &TrainConfig) -> String {
    let unseeded = TrainConfig { seed: 0, ..config.clone() };
    let json = serde_json::to_vec(&unseeded).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

pub fn unix_timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_seed_only() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 99, ..a.clone() };
        let c = TrainConfig { alpha: 1.0, ..a.clone() };
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 16);
    }
}
