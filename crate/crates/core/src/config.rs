//! Run configuration.
//!
//! One TOML or JSON file describes a run. Relative paths resolve against the
//! directory containing the config file. All randomness derives from `seed`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::RunStamp;
use crate::canonicalize::CleanPolicy;
use crate::composer::DEFAULT_PACK_BUDGET;
use crate::digest::sha256_hex;
use crate::genclient::ClientConfig;
use crate::review::ReviewPolicy;
use crate::trainplan::OverrideSet;
use crate::types::Stage;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Per-dataset mix ratios, in table order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRule {
    pub dataset: String,
    #[serde(default = "default_category")]
    pub category: String,
    pub ratio_stage_1_2: f64,
    pub ratio_stage_3: f64,
    /// Samples the ratio applies to; defaults to the dataset's corpus size.
    #[serde(default)]
    pub available: Option<u64>,
}

fn default_category() -> String {
    "uncategorized".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewSettings {
    #[serde(flatten)]
    pub policy: ReviewPolicy,
    pub port: u16,
    /// Event log and decisions directory; defaults to `<output_dir>/review`.
    pub dir: Option<PathBuf>,
}

impl Default for ReviewSettings {
    fn default() -> Self {
        ReviewSettings {
            policy: ReviewPolicy::default(),
            port: 8080,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub registry_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub clean_policy: CleanPolicy,
    /// Recipe JSON; the bundled recipe when absent.
    #[serde(default)]
    pub recipe: Option<PathBuf>,
    /// Directory of `*.txt` templates added to (and overriding) the bundled ones.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub client: ClientConfig,
    #[serde(default = "default_translation_fraction")]
    pub translation_fraction: f64,
    /// Empty means every corpus dataset at ratio 1.0 in all stages.
    #[serde(default)]
    pub mix: Vec<MixRule>,
    #[serde(default = "default_budgets")]
    pub pack_budget: BTreeMap<Stage, u64>,
    #[serde(default)]
    pub train_overrides: OverrideSet,
    #[serde(default)]
    pub review: ReviewSettings,
}

fn default_translation_fraction() -> f64 {
    0.2
}

fn default_budgets() -> BTreeMap<Stage, u64> {
    Stage::ALL.iter().map(|s| (*s, DEFAULT_PACK_BUDGET)).collect()
}

impl RunConfig {
    /// Minimal config with defaults everywhere.
    pub fn new(registry_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        RunConfig {
            registry_dir: registry_dir.into(),
            output_dir: output_dir.into(),
            seed,
            clean_policy: CleanPolicy::default(),
            recipe: None,
            templates_dir: None,
            client: ClientConfig::default(),
            translation_fraction: default_translation_fraction(),
            mix: Vec::new(),
            pack_budget: default_budgets(),
            train_overrides: OverrideSet::new(),
            review: ReviewSettings::default(),
        }
    }

    /// Load from `.toml` or `.json`, resolving relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |reason: String| ConfigError::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let mut cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.registry_dir);
        fix(&mut self.output_dir);
        for p in [&mut self.recipe, &mut self.templates_dir, &mut self.review.dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.translation_fraction) {
            return bad(format!("translation_fraction {} outside [0, 1]", self.translation_fraction));
        }
        for r in &self.mix {
            for v in [r.ratio_stage_1_2, r.ratio_stage_3] {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("mix ratio {v} for {} outside [0, 1]", r.dataset));
                }
            }
        }
        if let Some((s, _)) = self.pack_budget.iter().find(|(_, b)| **b == 0) {
            return bad(format!("pack budget for stage {s} must be >= 1"));
        }
        let p = &self.review.policy;
        if !(0.0..=1.0).contains(&p.diversity_fraction) || !(0.0..=1.0).contains(&p.diversity_pool_rate) {
            return bad("review fractions must be in [0, 1]".into());
        }
        self.client.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn pack_budget(&self, stage: Stage) -> u64 {
        self.pack_budget.get(&stage).copied().unwrap_or(DEFAULT_PACK_BUDGET)
    }

    pub fn review_dir(&self) -> PathBuf {
        self.review
            .dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("review"))
    }

    /// SHA-256 over the canonical JSON form, excluding `output_dir`.
    ///
    /// Two runs with equal hashes produce equal outputs under the mock backend.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        // serde_json maps are sorted, so this is canonical.
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn stamp(&self) -> RunStamp {
        RunStamp {
            seed: self.seed,
            config_hash: self.config_hash(),
        }
    }
}
