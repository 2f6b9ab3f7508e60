//! Layered run configuration: TOML file, then environment (secrets and the
//! reproducible-timestamp override), then command-line flags.
//!
//! The seed is mandatory and never defaulted from the clock; reproducibility
//! is the product.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collapse::{CleanAction, CleanPolicy};
use crate::dpo::{DpoConfig, RefSync};
use crate::gateway::EndpointConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("seed is mandatory: set `seed` in the config file or pass --seed")]
    MissingSeed,
    #[error("{what} path does not exist: {path}")]
    MissingPath { what: String, path: PathBuf },
    #[error("missing {0}: set it in the config file or pass the matching flag")]
    MissingField(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub constitution: Option<PathBuf>,
    #[serde(default)]
    pub endpoints: EndpointsSection,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub dpo: DpoSection,
    #[serde(default)]
    pub clean: CleanSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsSection {
    pub student: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub temperature: f64,
    pub max_tokens: u32,
    pub rounds: usize,
    pub linked_pairs: bool,
    pub concurrency: usize,
    pub train_ratio: f64,
    pub max_failure_fraction: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 512,
            rounds: 1,
            linked_pairs: true,
            concurrency: 4,
            train_ratio: 10.0 / 11.0,
            max_failure_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub temperature: f64,
    pub max_tokens: u32,
    pub judge_max_tokens: u32,
    pub concurrency: usize,
    pub train_ratio: f64,
    pub principle_id: Option<String>,
    pub max_failure_fraction: f64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_tokens: 512,
            judge_max_tokens: 16,
            concurrency: 4,
            train_ratio: 5.0 / 6.0,
            principle_id: None,
            max_failure_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoSection {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means full-batch.
    pub batch_size: usize,
    /// "frozen" or a positive step interval for periodic reference sync.
    pub ref_sync_every: usize,
    pub vocab_cap: usize,
    /// 0 gives uniform initial logits; otherwise seeded noise at this scale.
    pub init_scale: f64,
}

impl Default for DpoSection {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1.0,
            epochs: 300,
            batch_size: 0,
            ref_sync_every: 0,
            vocab_cap: 64,
            init_scale: 0.0,
        }
    }
}

impl DpoSection {
    pub fn to_dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.beta,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: if self.batch_size == 0 { usize::MAX } else { self.batch_size },
            ref_sync: if self.ref_sync_every == 0 {
                RefSync::Frozen
            } else {
                RefSync::PeriodicEvery(self.ref_sync_every)
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanSection {
    pub action: CleanAction,
    pub trailing_repeat_threshold: usize,
    pub emoji_run_threshold: usize,
    pub ngram_ratio_threshold: f64,
    pub similarity_threshold: f64,
    pub ngram_n: usize,
}

impl Default for CleanSection {
    fn default() -> Self {
        let p = CleanPolicy::default();
        Self {
            action: CleanAction::StripTail,
            trailing_repeat_threshold: p.trailing_repeat_threshold,
            emoji_run_threshold: p.emoji_run_threshold,
            ngram_ratio_threshold: p.ngram_ratio_threshold,
            similarity_threshold: p.similarity_threshold,
            ngram_n: p.ngram_n,
        }
    }
}

impl CleanSection {
    pub fn to_policy(&self) -> Result<CleanPolicy, ConfigError> {
        let policy = CleanPolicy {
            trailing_repeat_threshold: self.trailing_repeat_threshold,
            emoji_run_threshold: self.emoji_run_threshold,
            ngram_ratio_threshold: self.ngram_ratio_threshold,
            similarity_threshold: self.similarity_threshold,
            ngram_n: self.ngram_n,
            action: self.action,
        };
        policy.validate().map_err(ConfigError::Invalid)?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub gen_temperature: f64,
    pub gen_max_tokens: u32,
    pub judge_max_tokens: u32,
    pub concurrency: usize,
    /// Token budget when the candidate is a tiny-policy checkpoint.
    pub policy_max_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            gen_temperature: 0.7,
            gen_max_tokens: 256,
            judge_max_tokens: 16,
            concurrency: 4,
            policy_max_tokens: 16,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

pub fn require_seed(file: &FileConfig, flag: Option<u64>) -> Result<u64, ConfigError> {
    flag.or(file.seed).ok_or(ConfigError::MissingSeed)
}

pub fn require_existing(what: &str, path: &Path) -> Result<PathBuf, ConfigError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(ConfigError::MissingPath { what: what.to_string(), path: path.to_path_buf() })
    }
}

/// Timestamp resolution: explicit flag, then SOURCE_DATE_EPOCH, then the wall
/// clock. Pipelines treat the result as config, so fixing it fixes the output
/// bytes.
pub fn resolve_timestamp(flag: Option<&str>) -> String {
    if let Some(value) = flag {
        return value.to_string();
    }
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(secs) = epoch.parse::<i64>() {
            return format_rfc3339(secs);
        }
    }
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    format_rfc3339(now)
}

/// UTC RFC 3339 from Unix seconds.
pub fn format_rfc3339(unix_secs: i64) -> String {
    let days = unix_secs.div_euclid(86_400);
    let secs_of_day = unix_secs.rem_euclid(86_400);
    let (year, month, day) = civil_from_days(days);
    let (h, m, s) = (secs_of_day / 3600, (secs_of_day / 60) % 60, secs_of_day % 60);
    format!("{year:04}-{month:02}-{day:02}T{h:02}:{m:02}:{s:02}Z")
}

// days-to-civil conversion over the proleptic Gregorian calendar
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let year = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if month <= 2 { year + 1 } else { year }, month, day)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: FileConfig = toml::from_str("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.stage1.rounds, 1);
        assert!((cfg.stage2.train_ratio - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(cfg.dpo.beta, 0.1);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = toml::from_str::<FileConfig>("seed = 7\nbanana = 1\n").unwrap_err();
        assert!(err.to_string().contains("banana"));
    }

    #[test]
    fn endpoint_section_round_trips() {
        let cfg: FileConfig = toml::from_str(
            r#"
seed = 1
[endpoints.student]
base_url = "http://localhost:8000/v1"
model_name = "student"
max_concurrency = 8
"#,
        )
        .unwrap();
        let student = cfg.endpoints.student.unwrap();
        assert_eq!(student.max_concurrency, 8);
        assert_eq!(student.max_retries, 3); // default
    }

    #[test]
    fn seed_is_mandatory() {
        let cfg = FileConfig::default();
        assert!(matches!(require_seed(&cfg, None), Err(ConfigError::MissingSeed)));
        assert_eq!(require_seed(&cfg, Some(3)).unwrap(), 3);
        let mut cfg = FileConfig::default();
        cfg.seed = Some(9);
        assert_eq!(require_seed(&cfg, None).unwrap(), 9);
        // flag wins over file
        assert_eq!(require_seed(&cfg, Some(3)).unwrap(), 3);
    }

    #[test]
    fn rfc3339_formatting() {
        assert_eq!(format_rfc3339(0), "1970-01-01T00:00:00Z");
        assert_eq!(format_rfc3339(951_782_400), "2000-02-29T00:00:00Z");
        assert_eq!(format_rfc3339(1_735_689_600), "2025-01-01T00:00:00Z");
        assert_eq!(format_rfc3339(-86_400), "1969-12-31T00:00:00Z");
    }

    #[test]
    fn timestamp_flag_wins() {
        assert_eq!(resolve_timestamp(Some("2026-01-01T00:00:00Z")), "2026-01-01T00:00:00Z");
    }

    #[test]
    fn dpo_section_maps_to_config() {
        let section = DpoSection { batch_size: 0, ref_sync_every: 50, ..DpoSection::default() };
        let config = section.to_dpo_config();
        assert_eq!(config.batch_size, usize::MAX);
        assert_eq!(config.ref_sync, RefSync::PeriodicEvery(50));
    }
}
