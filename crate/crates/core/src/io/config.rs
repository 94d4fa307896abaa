//! Experiment configuration: one JSON document covering data synthesis,
//! windowing, and both training phases. Unknown keys are rejected; every
//! field has an explicit default, so a parsed config is always complete.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MilcError, Result};
use crate::windows::WindowSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every RNG in a run derives from it.
    pub seed: u64,

    // Synthesis.
    pub pretrain_series: usize,
    pub pretrain_nodes: usize,
    pub pretrain_len: usize,
    pub downstream_samples: usize,
    pub sample_len: usize,

    // Windowing.
    pub win_len: usize,
    pub overlap: f64,
    /// Contiguous windows aggregated per sequence during pre-training.
    pub pretrain_run_windows: usize,

    // Training.
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub downstream_batch: usize,
    pub downstream_lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub trials: usize,
    pub n_train_grid: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            pretrain_series: 50,
            pretrain_nodes: 10,
            pretrain_len: 20000,
            downstream_samples: 2000,
            sample_len: 200,
            win_len: 20,
            overlap: 0.5,
            pretrain_run_windows: 13,
            pretrain_batch: 32,
            pretrain_lr: 3e-4,
            downstream_batch: 64,
            downstream_lr: 1e-4,
            max_epochs: 300,
            patience: 15,
            trials: 10,
            n_train_grid: vec![16, 32, 64, 100, 200, 400, 800, 1600],
        }
    }
}

impl ExperimentConfig {
    /// CI-speed profile: tiny corpus and downstream set, shorter training.
    pub fn quick() -> Self {
        ExperimentConfig {
            pretrain_series: 10,
            pretrain_len: 2000,
            downstream_samples: 200,
            max_epochs: 60,
            patience: 10,
            trials: 3,
            n_train_grid: vec![16, 32, 64, 160],
            ..ExperimentConfig::default()
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec { win_len: self.win_len, overlap: self.overlap }
    }

    /// Cross-field invariants beyond what parsing enforces.
    pub fn validate(&self) -> Result<()> {
        let spec = self.window_spec();
        spec.validate()?;
        if self.pretrain_series < 2 {
            return Err(MilcError::Config("pretrain_series must be ≥ 2 (InfoNCE needs negatives)".into()));
        }
        if self.pretrain_batch < 2 {
            return Err(MilcError::Config("pretrain_batch must be ≥ 2 (InfoNCE needs negatives)".into()));
        }
        if self.downstream_batch == 0 || self.max_epochs == 0 || self.patience == 0 || self.trials == 0 {
            return Err(MilcError::Config(
                "downstream_batch, max_epochs, patience, and trials must be positive".into(),
            ));
        }
        if self.pretrain_run_windows == 0 {
            return Err(MilcError::Config("pretrain_run_windows must be positive".into()));
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0)
            || !(self.downstream_lr.is_finite() && self.downstream_lr > 0.0)
        {
            return Err(MilcError::Config("learning rates must be positive and finite".into()));
        }
        if self.sample_len < self.win_len {
            return Err(MilcError::Config(format!(
                "sample_len {} shorter than win_len {}",
                self.sample_len, self.win_len
            )));
        }
        // The pre-training run must fit in the shortest slice (test, 15%).
        let run_span = self.win_len + (self.pretrain_run_windows - 1) * spec.stride();
        let shortest_slice = self.pretrain_len * 15 / 100;
        if run_span > shortest_slice {
            return Err(MilcError::Config(format!(
                "a {}-window run spans {} time points but the shortest slice has {}",
                self.pretrain_run_windows, run_span, shortest_slice
            )));
        }
        let train_split = self.downstream_samples * 8 / 10;
        if self.n_train_grid.is_empty() {
            return Err(MilcError::Config("n_train_grid must not be empty".into()));
        }
        for &n in &self.n_train_grid {
            if n < 2 || n > train_split {
                return Err(MilcError::Config(format!(
                    "n_train {} outside [2, {}] (train split of {} samples)",
                    n, train_split, self.downstream_samples
                )));
            }
        }
        Ok(())
    }
}

/// Parse and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_in_both_profiles() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::quick().validate().unwrap();
    }

    #[test]
    fn empty_json_yields_all_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"seeed": 3}"#).unwrap_err();
        assert!(err.to_string().contains("seeed"));
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 99, "trials": 2}"#).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.trials, 2);
        assert_eq!(cfg.win_len, 20);
    }

    #[test]
    fn cross_field_violations_are_config_errors() {
        let mut bad = ExperimentConfig::default();
        bad.n_train_grid = vec![1601];
        assert!(matches!(bad.validate(), Err(MilcError::Config(_))));

        let mut bad = ExperimentConfig::default();
        bad.pretrain_len = 300; // 15% slice = 45 < the 140-point run span
        assert!(bad.validate().is_err());

        let mut bad = ExperimentConfig::default();
        bad.pretrain_batch = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_file(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = ExperimentConfig::quick();
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(load_config(&path).unwrap(), cfg);
    }
}
