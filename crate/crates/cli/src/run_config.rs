//! Flat experiment configuration read from JSON.

use std::path::{Path, PathBuf};

use mgcma::harness::TrainConfig;
use mgcma::pipeline::{PipelineConfig, Stage};
use mgcma::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Every key is optional in the file; missing keys keep the preset value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub stage_order: Vec<Stage>,
    pub model_dim: usize,
    pub num_heads: usize,
    pub n_blocks: usize,
    pub tau: f64,
    pub p: f64,
    pub q: f64,
    pub num_classes: usize,
    pub normalize_instances: bool,
    pub share_token_branches: bool,
    pub token_layer_norm: bool,
    pub branch_layers: usize,
    /// Dataset directory holding `manifest.jsonl`.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_train(t: &TrainConfig) -> Self {
        let p = &t.pipeline;
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: t.seed,
            stage_order: p.stage_order.clone(),
            model_dim: p.model_dim,
            num_heads: p.num_heads,
            n_blocks: p.n_blocks,
            tau: p.tau,
            p: p.p,
            q: p.q,
            num_classes: p.num_classes,
            normalize_instances: p.normalize_instances,
            share_token_branches: p.share_token_branches,
            token_layer_norm: p.token_layer_norm,
            branch_layers: p.branch_layers,
            data: None,
            out: None,
        }
    }

    pub fn full_scale() -> Self {
        Self::from_train(&TrainConfig::full_scale())
    }

    /// Overlays the keys present in `file` on `base`.
    pub fn load(base: Self, file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(file)?;
        let overlay: Value = serde_json::from_str(&text)?;
        let Value::Object(overlay) = overlay else {
            return Err(Error::InvalidConfig(format!("{} must hold a JSON object", file.display())));
        };
        // Rejects unknown keys and ill-typed values.
        serde_json::from_value::<RunConfig>(Value::Object(overlay.clone()))?;
        let Value::Object(mut merged) = serde_json::to_value(base)? else {
            unreachable!("RunConfig serializes to an object");
        };
        merged.extend(overlay);
        Ok(serde_json::from_value(Value::Object(merged))?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed: self.seed,
            pipeline: PipelineConfig {
                stage_order: self.stage_order.clone(),
                model_dim: self.model_dim,
                num_heads: self.num_heads,
                n_blocks: self.n_blocks,
                tau: self.tau,
                p: self.p,
                q: self.q,
                num_classes: self.num_classes,
                normalize_instances: self.normalize_instances,
                share_token_branches: self.share_token_branches,
                token_layer_norm: self.token_layer_norm,
                branch_layers: self.branch_layers,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(json: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), json).unwrap();
        f
    }

    #[test]
    fn overlay_keeps_preset_for_missing_keys() {
        let f = write(r#"{"max_epochs": 3, "stage_order": ["IAM", "DAM"]}"#);
        let cfg = RunConfig::load(RunConfig::full_scale(), f.path()).unwrap();
        assert_eq!(cfg.max_epochs, 3);
        assert_eq!(cfg.model_dim, 768);
        assert_eq!(cfg.stage_order, vec![Stage::Iam, Stage::Dam]);
    }

    #[test]
    fn unknown_keys_and_bad_combinations_rejected() {
        let f = write(r#"{"learning_rte": 0.1}"#);
        assert!(RunConfig::load(RunConfig::default(), f.path()).is_err());
        let f = write(r#"{"model_dim": 30, "num_heads": 4}"#);
        let cfg = RunConfig::load(RunConfig::default(), f.path()).unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default().train_config().unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }
}
