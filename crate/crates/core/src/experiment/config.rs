//! Experiment configuration in TOML.
//!
//! ```toml
//! seed = 42
//! secure_aggregation = false
//! fixed_point_bits = 24
//! tracked_indices = [0, 9]
//!
//! [model]
//! feature_dim = 8
//! class_count = 4
//! l2 = 0.001
//!
//! [partition]
//! scheme = "dirichlet_label_skew"   # or "iid"
//! dirichlet_alpha = 0.5
//! min_samples_per_client = 10
//!
//! [schedule]
//! rounds = 100
//! local_epochs = 5
//! learning_rate = 0.1
//! lr_decay = 0.99
//! participation_fraction = 1.0
//!
//! [policy]
//! kind = "size_weighted"            # uniform, custom_weighted, privacy_weighted
//!
//! [privacy]
//! enabled = true
//! epsilon = 1.0
//! delta = 1e-5
//! clip_norm = 1.0
//! [[privacy.overrides]]
//! client = 0
//! epsilon = 0.5
//!
//! [[domains]]
//! name = "medical"
//! recipe = "medical"
//! train_samples = 600
//! test_samples = 200
//! clients = 2
//!
//! [transport]
//! listen = "127.0.0.1:7700"
//! server = "127.0.0.1:7700"
//! timeout_secs = 30.0
//! ```
//!
//! Each domain's training data is split among its own clients. Client ids run
//! from 0 across the domains in the order they are listed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DomainRecipe, PartitionScheme};
use crate::federation::{TrainingSchedule, DEFAULT_EPSILON_CAP};
use crate::model::ModelSpec;
use crate::privacy::PrivacyBudget;
use crate::transport::DEFAULT_PORT;

/// A configuration problem, attributed to the offending key.
#[derive(Debug, Error, PartialEq)]
#[error("config error at `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl ToString) -> Self {
        Self { key: key.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub dirichlet_alpha: f64,
    pub min_samples_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            scheme: PartitionScheme::DirichletLabelSkew,
            dirichlet_alpha: 0.5,
            min_samples_per_client: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Uniform,
    SizeWeighted,
    CustomWeighted,
    /// Custom weights derived from sample counts and privacy budgets.
    PrivacyWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyChoice,
    pub epsilon_cap: f64,
    /// One weight per client, for `custom_weighted`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyChoice::SizeWeighted,
            epsilon_cap: DEFAULT_EPSILON_CAP,
            weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyOverride {
    pub client: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<PrivacyOverride>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        let d = PrivacyBudget::disabled();
        Self {
            enabled: d.enabled,
            epsilon: d.epsilon,
            delta: d.delta,
            clip_norm: d.clip_norm,
            overrides: Vec::new(),
        }
    }
}

impl PrivacyConfig {
    /// Budget of `client`: the default with its override applied.
    pub fn budget_for(&self, client: u32) -> PrivacyBudget {
        let mut b = PrivacyBudget {
            epsilon: self.epsilon,
            delta: self.delta,
            clip_norm: self.clip_norm,
            enabled: self.enabled,
        };
        if let Some(o) = self.overrides.iter().find(|o| o.client == client) {
            b.enabled = o.enabled.unwrap_or(b.enabled);
            b.epsilon = o.epsilon.unwrap_or(b.epsilon);
            b.delta = o.delta.unwrap_or(b.delta);
            b.clip_norm = o.clip_norm.unwrap_or(b.clip_norm);
        }
        b
    }
}

/// A CSV file split into train and test parts by a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths are resolved against the config file's directory.
    pub path: String,
    pub features: Vec<String>,
    pub label: String,
    pub test_fraction: f64,
}

/// One data domain. Exactly one of `recipe`, `inline` and `csv` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub clients: usize,
    /// Built-in recipe name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub train_samples: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub test_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<DomainRecipe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

/// Process-local network settings; not part of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub listen: String,
    pub server: String,
    pub timeout_secs: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            listen: format!("127.0.0.1:{DEFAULT_PORT}"),
            server: format!("127.0.0.1:{DEFAULT_PORT}"),
            timeout_secs: 30.0,
        }
    }
}

fn default_bits() -> u32 {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub secure_aggregation: bool,
    #[serde(default = "default_bits")]
    pub fixed_point_bits: u32,
    #[serde(default)]
    pub tracked_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub model: ModelSpec,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub schedule: TrainingSchedule,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    pub domains: Vec<DomainConfig>,
    /// Directory of the file the config was read from.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Parse `VALUE` as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Set `path` (dot-separated; numeric segments index arrays) to `value`.
fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), ConfigError> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::new(path, "malformed key"));
    }
    let (last, parents) = segments.split_last().expect("non-empty");
    let mut node = root;
    for seg in parents {
        node = match node {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| ConfigError::new(path, format!("`{seg}` is not an array index")))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| ConfigError::new(path, format!("index {i} out of range ({len} entries)")))?
            }
            _ => return Err(ConfigError::new(path, format!("`{seg}` is not a table"))),
        };
    }
    match node {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last
                .parse()
                .map_err(|_| ConfigError::new(path, format!("`{last}` is not an array index")))?;
            let len = a.len();
            *a.get_mut(i)
                .ok_or_else(|| ConfigError::new(path, format!("index {i} out of range ({len} entries)")))? = value;
        }
        _ => return Err(ConfigError::new(path, "parent is not a table")),
    }
    Ok(())
}

fn toml_error_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "<document>".into()
}

impl ExperimentConfig {
    /// Parse TOML text, apply `KEY=VALUE` overrides and validate.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::new(toml_error_key(&e), e.message()))?;
        let mut root = toml::Value::Table(table);
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::new(o.as_str(), "override must have the form KEY=VALUE"))?;
            set_path(&mut root, key.trim(), parse_override_value(value.trim()))?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::new(toml_error_key(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML: fixed key order, defaults written out.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical form with process-local settings
    /// (output directory, network addresses) removed.
    pub fn hash(&self) -> [u8; 32] {
        let mut shared = self.clone();
        shared.output_dir = None;
        shared.transport = TransportConfig::default();
        Sha256::digest(shared.to_canonical_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn client_count(&self) -> u32 {
        self.domains.iter().map(|d| d.clients as u32).sum()
    }

    /// Client ids of each domain, in domain order.
    pub fn client_ranges(&self) -> Vec<std::ops::Range<u32>> {
        let mut start = 0;
        self.domains
            .iter()
            .map(|d| {
                let r = start..start + d.clients as u32;
                start = r.end;
                r
            })
            .collect()
    }

    /// Index of the domain that `client` belongs to.
    pub fn domain_of(&self, client: u32) -> Option<usize> {
        self.client_ranges().iter().position(|r| r.contains(&client))
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = &self.model;
        spec.validate().map_err(|e| ConfigError::new("model", e))?;
        self.schedule.validate().map_err(|e| ConfigError::new("schedule", e))?;
        if self.fixed_point_bits > 32 {
            return Err(ConfigError::new("fixed_point_bits", "must be at most 32"));
        }
        for &i in &self.tracked_indices {
            if i >= spec.param_dim() {
                return Err(ConfigError::new(
                    "tracked_indices",
                    format!("index {i} is out of range for {} parameters", spec.param_dim()),
                ));
            }
        }

        let p = &self.partition;
        if !(p.dirichlet_alpha > 0.0 && p.dirichlet_alpha.is_finite()) {
            return Err(ConfigError::new("partition.dirichlet_alpha", "must be positive"));
        }
        if p.min_samples_per_client == 0 {
            return Err(ConfigError::new("partition.min_samples_per_client", "must be at least 1"));
        }

        if self.domains.is_empty() {
            return Err(ConfigError::new("domains", "at least one domain is required"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            let key = |f: &str| format!("domains.{i}.{f}");
            if d.name.is_empty() {
                return Err(ConfigError::new(key("name"), "must not be empty"));
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(ConfigError::new(key("name"), format!("duplicate domain `{}`", d.name)));
            }
            if d.clients == 0 {
                return Err(ConfigError::new(key("clients"), "must be at least 1"));
            }
            let sources = usize::from(d.recipe.is_some()) + usize::from(d.inline.is_some()) + usize::from(d.csv.is_some());
            if sources != 1 {
                return Err(ConfigError::new(
                    key("recipe"),
                    "exactly one of `recipe`, `inline` and `csv` must be given",
                ));
            }
            if let Some(name) = &d.recipe {
                DomainRecipe::builtin(name, spec.feature_dim, spec.class_count)
                    .map_err(|e| ConfigError::new(key("recipe"), e))?;
            }
            if let Some(recipe) = &d.inline {
                recipe
                    .validate(spec.feature_dim, spec.class_count)
                    .map_err(|e| ConfigError::new(key("inline"), e))?;
            }
            if let Some(csv) = &d.csv {
                if !(csv.test_fraction > 0.0 && csv.test_fraction < 1.0) {
                    return Err(ConfigError::new(key("csv.test_fraction"), "must lie in (0, 1)"));
                }
                if csv.features.len() != spec.feature_dim {
                    return Err(ConfigError::new(
                        key("csv.features"),
                        format!("{} columns listed but model.feature_dim is {}", csv.features.len(), spec.feature_dim),
                    ));
                }
            } else {
                if d.train_samples < d.clients * p.min_samples_per_client {
                    return Err(ConfigError::new(
                        key("train_samples"),
                        format!(
                            "{} samples cannot give {} clients {} each",
                            d.train_samples, d.clients, p.min_samples_per_client
                        ),
                    ));
                }
                if d.test_samples == 0 {
                    return Err(ConfigError::new(key("test_samples"), "must be at least 1"));
                }
            }
        }

        let n = self.client_count();
        let pol = &self.policy;
        if !(pol.epsilon_cap > 0.0 && pol.epsilon_cap.is_finite()) {
            return Err(ConfigError::new("policy.epsilon_cap", "must be positive"));
        }
        match pol.kind {
            PolicyChoice::CustomWeighted => {
                if pol.weights.len() != n as usize {
                    return Err(ConfigError::new(
                        "policy.weights",
                        format!("{} weights given for {n} clients", pol.weights.len()),
                    ));
                }
                if let Some(w) = pol.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
                    return Err(ConfigError::new("policy.weights", format!("invalid weight {w}")));
                }
                if pol.weights.iter().sum::<f64>().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                    return Err(ConfigError::new("policy.weights", "weights sum to zero"));
                }
            }
            _ if !pol.weights.is_empty() => {
                return Err(ConfigError::new("policy.weights", "only used with kind = \"custom_weighted\""));
            }
            _ => {}
        }

        for (i, o) in self.privacy.overrides.iter().enumerate() {
            if o.client >= n {
                return Err(ConfigError::new(
                    format!("privacy.overrides.{i}.client"),
                    format!("client {} does not exist ({n} clients)", o.client),
                ));
            }
            if self.privacy.overrides[..i].iter().any(|p| p.client == o.client) {
                return Err(ConfigError::new(
                    format!("privacy.overrides.{i}.client"),
                    format!("second override for client {}", o.client),
                ));
            }
        }
        for c in 0..n {
            self.privacy.budget_for(c).validate().map_err(|e| {
                let key = match self.privacy.overrides.iter().position(|o| o.client == c) {
                    Some(i) => format!("privacy.overrides.{i}"),
                    None => "privacy".into(),
                };
                ConfigError::new(key, e)
            })?;
        }

        if !(self.transport.timeout_secs > 0.0 && self.transport.timeout_secs.is_finite()) {
            return Err(ConfigError::new("transport.timeout_secs", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7
tracked_indices = [0, 3]

[model]
feature_dim = 4
class_count = 3

[schedule]
rounds = 5

[privacy]
enabled = true
epsilon = 0.8
[[privacy.overrides]]
client = 2
enabled = false

[[domains]]
name = "a"
recipe = "medical"
train_samples = 60
test_samples = 20
clients = 2

[[domains]]
name = "b"
recipe = "user"
train_samples = 40
test_samples = 20
clients = 1
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(SAMPLE, &[]).unwrap();
        assert_eq!(cfg.schedule.rounds, 5);
        assert_eq!(cfg.schedule.local_epochs, 5);
        assert_eq!(cfg.policy.kind, PolicyChoice::SizeWeighted);
        assert_eq!(cfg.client_count(), 3);
        assert_eq!(cfg.domain_of(2), Some(1));
        assert!(cfg.privacy.budget_for(0).enabled);
        assert!(!cfg.privacy.budget_for(2).enabled);
        assert_eq!(cfg.privacy.budget_for(2).epsilon, 0.8);
    }

    #[test]
    fn canonical_form_roundtrips() {
        let cfg = ExperimentConfig::parse(SAMPLE, &[]).unwrap();
        let text = cfg.to_canonical_toml();
        let again = ExperimentConfig::parse(&text, &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.to_canonical_toml());
    }

    #[test]
    fn overrides_apply() {
        let o = ["privacy.enabled=false".to_string(), "domains.1.clients=3".into(), "schedule.rounds = 9".into()];
        let cfg = ExperimentConfig::parse(SAMPLE, &o).unwrap();
        assert!(!cfg.privacy.enabled);
        assert_eq!(cfg.domains[1].clients, 3);
        assert_eq!(cfg.schedule.rounds, 9);
        let o = ["partition.scheme=iid".to_string()];
        assert_eq!(ExperimentConfig::parse(SAMPLE, &o).unwrap().partition.scheme, PartitionScheme::Iid);
    }

    #[test]
    fn errors_name_the_key() {
        let err = ExperimentConfig::parse(SAMPLE, &["schedule.roundz=3".into()]).unwrap_err();
        assert_eq!(err.key, "roundz");
        let err = ExperimentConfig::parse(SAMPLE, &["domains.0.clients=0".into()]).unwrap_err();
        assert_eq!(err.key, "domains.0.clients");
        let err = ExperimentConfig::parse(SAMPLE, &["tracked_indices=[15]".into()]).unwrap_err();
        assert_eq!(err.key, "tracked_indices");
        let err = ExperimentConfig::parse(SAMPLE, &["privacy.overrides.0.client=9".into()]).unwrap_err();
        assert_eq!(err.key, "privacy.overrides.0.client");
        let err = ExperimentConfig::parse(SAMPLE, &["domains.7.clients=1".into()]).unwrap_err();
        assert_eq!(err.key, "domains.7.clients");
        let err = ExperimentConfig::parse(SAMPLE, &["policy.kind=custom_weighted".into()]).unwrap_err();
        assert_eq!(err.key, "policy.weights");
        assert!(ExperimentConfig::parse(SAMPLE, &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_ignores_local_settings() {
        let a = ExperimentConfig::parse(SAMPLE, &[]).unwrap();
        let b = ExperimentConfig::parse(SAMPLE, &["transport.listen=\"0.0.0.0:9\"".into(), "output_dir=\"x\"".into()])
            .unwrap();
        let c = ExperimentConfig::parse(SAMPLE, &["seed=8".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash_hex().len(), 64);
    }
}
