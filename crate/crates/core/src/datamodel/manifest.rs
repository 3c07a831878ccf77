use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{atomic_write, read_file};
use crate::error::{MoodError, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    IntermediateFt,
    Finetune,
    Extract,
    Fit,
    Score,
    Eval,
}

impl Stage {
    pub fn is_stochastic(self) -> bool {
        matches!(self, Stage::Pretrain | Stage::IntermediateFt | Stage::Finetune)
    }
}

/// Provenance record written next to every stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stage: Stage,
    /// Hex SHA-256 of the resolved stage configuration.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Stage-specific payload such as training traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Value>,
}

impl RunManifest {
    pub fn new(stage: Stage, config_digest: impl Into<String>, seed: Option<u64>) -> Result<Self> {
        if stage.is_stochastic() && seed.is_none() {
            return Err(MoodError::Config(format!("stage {stage:?} requires a seed")));
        }
        Ok(RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            stage,
            config_digest: config_digest.into(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            trace: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let m: RunManifest =
            serde_json::from_slice(&bytes).map_err(|e| MoodError::Format(format!("bad manifest: {e}")))?;
        if m.stage.is_stochastic() && m.seed.is_none() {
            return Err(MoodError::Format(format!("manifest for {:?} lacks a seed", m.stage)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut m = RunManifest::new(Stage::IntermediateFt, "ab12", Some(7)).unwrap();
        m.inputs.push("a.bin".into());
        m.trace = Some(serde_json::json!({"loss": [1.0, 0.5]}));
        let text = m.to_json();
        assert!(text.contains("\"intermediate_ft\""));
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn stochastic_stage_needs_seed() {
        assert!(RunManifest::new(Stage::Pretrain, "x", None).is_err());
        assert!(RunManifest::new(Stage::Eval, "x", None).is_ok());
    }

    #[test]
    fn unknown_stage_rejected() {
        let text = r#"{"schema_version":1,"stage":"deploy","config_digest":"","seed":null,"inputs":[],"outputs":[]}"#;
        assert!(serde_json::from_str::<RunManifest>(text).is_err());
    }
}
