//! Config-file loading and flag/section/default resolution.

use std::path::Path;

use mood_core::{MoodError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub type Section = Map<String, Value>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub pretrain: Section,
    #[serde(default)]
    pub finetune: Section,
    #[serde(default)]
    pub extract: Section,
    #[serde(default)]
    pub fit: Section,
    #[serde(default)]
    pub score: Section,
    #[serde(default)]
    pub eval: Section,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let bytes = std::fs::read(path).map_err(|e| MoodError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| MoodError::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag overrides, collected as JSON so they merge with config sections.
#[derive(Debug, Default)]
pub struct Overrides(Section);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_owned(), serde_json::to_value(v).expect("flag value serializes"));
        }
        self
    }
}

/// Section entries overlaid with flags.
pub fn merged(section: &Section, overrides: Overrides) -> Section {
    let mut m = section.clone();
    m.extend(overrides.0);
    m
}

/// Removes and parses `key` from a merged section.
pub fn take<T: DeserializeOwned>(m: &mut Section, stage: &str, key: &str) -> Result<Option<T>> {
    m.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| MoodError::Config(format!("{stage}.{key}: {e}"))))
        .transpose()
}

/// Deserializes what remains of a section into a typed config.
pub fn finish<T: DeserializeOwned>(m: Section, stage: &str) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| MoodError::Config(format!("{stage}: {e}")))
}

/// Hex SHA-256 of the canonical JSON of a resolved stage configuration.
pub fn digest<T: Serialize>(resolved: &T) -> String {
    let bytes = serde_json::to_vec(resolved).expect("resolved config serializes");
    hex::encode(Sha256::digest(&bytes))
}
