use std::path::Path;

use matcha_core::eval::{GeometricEvalConfig, SemanticEvalConfig, TemporalEvalConfig};
use matcha_core::fusion::FusionConfig;
use matcha_core::supervision::LossConfig;
use matcha_core::training::{GenerationConfig, TrainConfig};
use matcha_core::{MatchaError, Result};
use serde::{Deserialize, Serialize};

/// Parameter groups read from `--config`. Every group is optional; a
/// missing group takes its defaults, a missing `train` group takes the
/// preset chosen on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub train: Option<TrainConfig>,
    pub generation: GenerationConfig,
    pub geometric: GeometricEvalConfig,
    pub semantic: SemanticEvalConfig,
    pub temporal: TemporalEvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| MatchaError::Domain(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| MatchaError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_groups_take_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"loss": {"tau": 0.5}, "train": {"stage1_iterations": 3}}"#).unwrap();
        assert_eq!(c.loss.tau, 0.5);
        assert_eq!(c.loss.beta, LossConfig::default().beta);
        assert_eq!(c.train.unwrap().stage1_iterations, 3);
        assert_eq!(c.fusion, FusionConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"fusoin": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"loss": {"temperature": 1}}"#).is_err());
    }
}
