//! Engine configuration. Numeric tunables live in a TOML file that also
//! names the policy and rule files governing the state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::operators::rules::{RuleError, RuleTable};
use crate::policy::{self, Policy, PolicyError};
use crate::salience::SalienceParams;

/// Active-state bound as a function of the interaction count n:
/// `floor(base + slope * n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Constant(u64),
    Affine { base: u64, slope: f64 },
}

impl Beta {
    pub fn at(&self, n: u64) -> usize {
        match *self {
            Beta::Constant(b) => b as usize,
            Beta::Affine { base, slope } => (base as f64 + slope * n as f64).floor().max(0.0) as usize,
        }
    }
}

impl Default for Beta {
    fn default() -> Self {
        Beta::Constant(200)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    pub salience: SalienceParams,
    /// Minimum cosine for routing into an existing topic.
    pub topic_threshold: f64,
    /// Minimum cosine for two topics to count as duplicates.
    pub duplicate_threshold: f64,
    pub top_topics: usize,
    pub beta: Beta,
    pub promote_fields: usize,
    pub promote_entries: usize,
    /// Record capacity of the CRUD baseline.
    pub baseline_capacity: usize,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            salience: SalienceParams::default(),
            topic_threshold: 0.35,
            duplicate_threshold: 0.9,
            top_topics: 3,
            beta: Beta::default(),
            promote_fields: 3,
            promote_entries: 5,
            baseline_capacity: 5,
        }
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.salience.validate().map_err(ConfigError::Invalid)?;
        if !(0.0..=1.0).contains(&self.topic_threshold) || !(0.0..=1.0).contains(&self.duplicate_threshold) {
            return Err(ConfigError::Invalid("similarity thresholds must lie in [0, 1]".into()));
        }
        if self.top_topics == 0 {
            return Err(ConfigError::Invalid("top_topics must be at least 1".into()));
        }
        match self.beta {
            Beta::Constant(0) => return Err(ConfigError::Invalid("beta must be at least 1".into())),
            Beta::Affine { base, slope } if base == 0 || !(slope >= 0.0) => {
                return Err(ConfigError::Invalid("affine beta needs base >= 1 and slope >= 0".into()))
            }
            _ => {}
        }
        if self.promote_fields == 0 || self.baseline_capacity == 0 {
            return Err(ConfigError::Invalid("promote_fields and baseline_capacity must be positive".into()));
        }
        Ok(())
    }
}

/// On-disk configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EngineConfig {
    #[serde(flatten)]
    pub params: EngineParams,
    /// Policy files, relative to the config file. Empty means the defaults.
    pub policy_files: Vec<PathBuf>,
    pub rule_file: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("policy file {path}: {source}")]
    Policy { path: PathBuf, source: PolicyError },
    #[error("rule file {path}: {source}")]
    Rules { path: PathBuf, source: RuleError },
}

/// Everything an engine needs at genesis, fully loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Settings {
    pub params: EngineParams,
    /// Canonical text of the policy set.
    pub policy_text: String,
    /// Canonical text of the dependency rules.
    pub rule_text: String,
}

impl Settings {
    pub fn new(params: EngineParams, policies: &[Policy], rules: &RuleTable) -> Self {
        Self { params, policy_text: policy::render_policies(policies), rule_text: rules.render() }
    }

    pub fn with_defaults(params: EngineParams) -> Self {
        Self::new(params, &policy::default_policy_set(), &RuleTable::default())
    }

    pub fn policies(&self) -> Result<Vec<Policy>, PolicyError> {
        policy::parse_policies(&self.policy_text)
    }

    pub fn rules(&self) -> Result<RuleTable, RuleError> {
        RuleTable::parse(&self.rule_text)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let mut cfg: EngineConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.policy_files = cfg.policy_files.iter().map(|p| base.join(p)).collect();
        cfg.rule_file = cfg.rule_file.map(|p| base.join(p));
        cfg.params.validate()?;
        Ok(cfg)
    }

    /// Reads policy and rule files and produces engine settings.
    pub fn settings(&self) -> Result<Settings, ConfigError> {
        self.params.validate()?;
        let policies = if self.policy_files.is_empty() {
            policy::default_policy_set()
        } else {
            let mut all = Vec::new();
            for path in &self.policy_files {
                let parsed = policy::parse_policies(&read(path)?)
                    .map_err(|source| ConfigError::Policy { path: path.clone(), source })?;
                all.extend(parsed);
            }
            policy::validate_names(&all)
                .map_err(|source| ConfigError::Policy { path: self.policy_files[0].clone(), source })?;
            all
        };
        let rules = match &self.rule_file {
            Some(path) => {
                RuleTable::parse(&read(path)?).map_err(|source| ConfigError::Rules { path: path.clone(), source })?
            }
            None => RuleTable::default(),
        };
        Ok(Settings::new(self.params.clone(), &policies, &rules))
    }
}
