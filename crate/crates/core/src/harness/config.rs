//! Experiment configuration files.
//!
//! ```toml
//! schema_version = 1
//! trainer = "onpolicy"
//! label = "point_goal"
//! seeds = [0, 100, 200]
//! max_env_steps = 100000
//! output_dir = "runs"
//!
//! [env]
//! name = "point_goal_2d"
//!
//! [onpolicy]
//! agents = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, EnvName};
use crate::error::{DiceError, Result};
use crate::offpolicy::OffPolicyConfig;
use crate::onpolicy::OnPolicyConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Onpolicy,
    Offpolicy,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 100, 200]
}

fn default_label() -> String {
    "run".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub trainer: TrainerKind,
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub max_env_steps: u64,
    /// Optional cap on training iterations (metrics rows).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    #[serde(default)]
    pub onpolicy: OnPolicyConfig,
    #[serde(default)]
    pub offpolicy: OffPolicyConfig,
}

impl ExperimentConfig {
    pub fn new(trainer: TrainerKind, env: EnvName, max_env_steps: u64) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            trainer,
            label: default_label(),
            seeds: default_seeds(),
            max_env_steps,
            max_iterations: None,
            output_dir: default_output_dir(),
            env: EnvConfig::named(env),
            onpolicy: OnPolicyConfig::default(),
            offpolicy: OffPolicyConfig::default(),
        }
    }

    /// Parses and validates a configuration; errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| DiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Loads `path` and applies `key.path=value` overrides before validation.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DiceError::io(path.display().to_string(), e))?;
        let with_path = |e: DiceError| match e {
            DiceError::Config(msg) => DiceError::Config(format!("{}: {msg}", path.display())),
            other => other,
        };
        if overrides.is_empty() {
            return Self::from_toml_str(&text).map_err(with_path);
        }
        // parse once untouched so file errors keep their line numbers
        Self::from_toml_str(&text).map_err(with_path)?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| with_path(DiceError::Config(e.to_string())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DiceError::Config(format!("after overrides: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DiceError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(DiceError::Config("seeds must not be empty".into()));
        }
        if self.max_env_steps == 0 {
            return Err(DiceError::Config("max_env_steps must be >= 1".into()));
        }
        if self.label.is_empty() || self.label.contains(['/', '\\']) {
            return Err(DiceError::Config(format!("invalid label {:?}", self.label)));
        }
        self.env.build()?;
        match self.trainer {
            TrainerKind::Onpolicy => self.onpolicy.validate(),
            TrainerKind::Offpolicy => self.offpolicy.validate(),
        }
    }

    /// Canonical TOML rendering of the resolved configuration.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Team size of the selected trainer.
    pub fn agents(&self) -> usize {
        match self.trainer {
            TrainerKind::Onpolicy => self.onpolicy.agents,
            TrainerKind::Offpolicy => self.offpolicy.agents,
        }
    }

    pub fn set_agents(&mut self, k: usize) {
        match self.trainer {
            TrainerKind::Onpolicy => self.onpolicy.agents = k,
            TrainerKind::Offpolicy => self.offpolicy.agents = k,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| DiceError::Config(format!("override {spec:?} is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(DiceError::Config(format!("override {spec:?} has an empty key")));
    }
    let mut cur = table;
    for key in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| DiceError::Config(format!("override {spec:?}: `{key}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
trainer = "onpolicy"
max_env_steps = 1000

[env]
name = "point_goal_2d"
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0, 100, 200]);
        assert_eq!(cfg.onpolicy.agents, 5);
        assert_eq!(cfg.onpolicy.sgd_iters, 10);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let text = format!("{MINIMAL}\n[onpolicy]\nagnets = 3\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("agnets"), "{err}");
        assert!(err.contains("line 10"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = MINIMAL.replace("max_env_steps = 1000", "max_env_steps = 1000\nseeds = []");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}\n[onpolicy]\nagents = 5\ntrain_batch = 4\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}peak = 2.0\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn overrides_by_dotted_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = ExperimentConfig::load_with_overrides(
            &path,
            &[
                "onpolicy.agents=3".into(),
                "onpolicy.use_dr=false".into(),
                "label=abc".into(),
                "seeds=[1, 2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.onpolicy.agents, 3);
        assert!(!cfg.onpolicy.use_dr);
        assert_eq!(cfg.label, "abc");
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert!(ExperimentConfig::load_with_overrides(&path, &["onpolicy.nope=1".into()]).is_err());
        assert!(ExperimentConfig::load_with_overrides(&path, &["noequals".into()]).is_err());
    }
}
