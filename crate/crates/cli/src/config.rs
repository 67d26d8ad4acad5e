//! Experiment configuration: a flat TOML file of documented keys.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! `--set key=value` overrides (values parsed as TOML), then the dedicated
//! flags (`--seed`, `--decoder`, `--jsonl`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sjdvp_core::drafter::GrowthReading;
use sjdvp_core::{ModelSpec, VerifyMode, VpConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    /// One model call per token.
    #[serde(rename = "ar")]
    Ar,
    /// Greedy Jacobi fixed-point iteration.
    #[serde(rename = "jacobi")]
    Jacobi,
    #[serde(rename = "sjd")]
    Sjd,
    #[serde(rename = "sjd-vp")]
    SjdVp,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Ar => "ar",
            DecoderKind::Jacobi => "jacobi",
            DecoderKind::Sjd => "sjd",
            DecoderKind::SjdVp => "sjd-vp",
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(Self::Ar),
            "jacobi" => Ok(Self::Jacobi),
            "sjd" => Ok(Self::Sjd),
            "sjd-vp" => Ok(Self::SjdVp),
            other => Err(CliError::Config(format!(
                "unknown decoder {other:?} (ar, jacobi, sjd, sjd-vp)"
            ))),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `seeds = [0, 1, 2]` or `seeds = "0..5"` (half-open).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range(String),
}

impl Seeds {
    pub fn expand(&self) -> Result<Vec<u64>> {
        let seeds = match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range(r) => {
                let bad = || CliError::Config(format!("seed range {r:?} is not `a..b`"));
                let (a, b) = r.split_once("..").ok_or_else(bad)?;
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                (a..b).collect()
            }
        };
        if seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(CliError::Config("seed list has duplicates".into()));
        }
        Ok(seeds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // Model.
    pub model_seed: u64,
    pub order: usize,
    pub vocab: usize,
    pub concentration: f64,
    /// Attractor mixing weight; 0 gives a plain Markov table.
    pub attractor: f64,
    pub model_top_k: Option<usize>,

    // Prompts.
    pub prompt_seed: u64,
    pub prompts: usize,
    pub prefix_len: usize,
    /// Full sequence length T, prefix included.
    pub target_len: usize,

    // Decoding. The first decoder is the comparison baseline.
    pub decoders: Vec<DecoderKind>,
    pub window: usize,
    pub verify: VerifyMode,
    pub max_iters: Option<usize>,
    pub jacobi_max_iters: Option<usize>,

    // Drafter.
    pub gamma: f64,
    pub history_len: usize,
    pub growth_steps: usize,
    pub topk_ratio: f64,
    pub eps: f64,
    pub growth_reading: GrowthReading,
    pub ewa_includes_current: bool,
    pub score_clamp: Option<f64>,

    pub seeds: Seeds,
    /// Write trajectory logs.
    pub jsonl: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vp = VpConfig::default();
        Self {
            model_seed: 0,
            order: 1,
            vocab: 64,
            concentration: 0.5,
            attractor: 0.3,
            model_top_k: None,
            prompt_seed: 1,
            prompts: 200,
            prefix_len: 1,
            target_len: 128,
            decoders: vec![DecoderKind::Sjd, DecoderKind::SjdVp],
            window: 16,
            verify: VerifyMode::Strict,
            max_iters: None,
            jacobi_max_iters: None,
            gamma: vp.gamma,
            history_len: vp.history_len,
            growth_steps: vp.growth_steps,
            topk_ratio: vp.topk_ratio,
            eps: vp.eps,
            growth_reading: vp.growth_reading,
            ewa_includes_current: vp.ewa_includes_current,
            score_clamp: vp.score_clamp,
            seeds: Seeds::List((0..5).collect()),
            jsonl: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }

    /// Reads `path` (if any), applies `key=value` overrides, and parses.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            seed: self.model_seed,
            order: self.order,
            vocab: self.vocab,
            concentration: self.concentration,
            attractor_weight: self.attractor,
            top_k: self.model_top_k,
        }
    }

    pub fn vp_config(&self) -> VpConfig {
        VpConfig {
            gamma: self.gamma,
            history_len: self.history_len,
            growth_steps: self.growth_steps,
            topk_ratio: self.topk_ratio,
            eps: self.eps,
            verify_mode: self.verify,
            growth_reading: self.growth_reading,
            ewa_includes_current: self.ewa_includes_current,
            score_clamp: self.score_clamp,
        }
    }

    /// Checks everything before any run starts. `relaxed` admits the
    /// drafter settings only sweeps may use and returns their warnings.
    pub fn validate(&self, relaxed: bool) -> Result<Vec<String>> {
        let cfg = |e: sjdvp_core::Error| CliError::Config(e.to_string());
        self.model_spec().validate().map_err(cfg)?;
        if self.prompts == 0 {
            return Err(CliError::Config("prompts must be >= 1".into()));
        }
        if self.prefix_len == 0 {
            return Err(CliError::Config("prefix_len must be >= 1".into()));
        }
        if self.target_len <= self.prefix_len {
            return Err(CliError::Config(format!(
                "target_len {} must exceed prefix_len {}",
                self.target_len, self.prefix_len
            )));
        }
        if self.decoders.is_empty() {
            return Err(CliError::Config("no decoders selected".into()));
        }
        let mut seen = self.decoders.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.decoders.len() {
            return Err(CliError::Config("decoder listed twice".into()));
        }
        if self.window == 0 {
            return Err(CliError::Config("window must be >= 1".into()));
        }
        if self.max_iters == Some(0) || self.jacobi_max_iters == Some(0) {
            return Err(CliError::Config("iteration caps must be >= 1".into()));
        }
        self.seeds.expand()?;
        let mut warnings = Vec::new();
        if self.decoders.contains(&DecoderKind::SjdVp) {
            let vp = self.vp_config();
            if relaxed {
                warnings = vp.validate_relaxed().map_err(cfg)?;
            } else {
                vp.validate().map_err(cfg)?;
            }
        }
        Ok(warnings)
    }

    /// Hex SHA-256 of the canonical JSON form of the configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// `key=value`, where `value` is a TOML value; bare words are read as
/// strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    table.insert(key.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = ExperimentConfig::default();
        assert_eq!((c.gamma, c.history_len, c.growth_steps), (0.8, 3, 3));
        assert_eq!(c.topk_ratio, 0.10);
        assert_eq!(c.window, 16);
        assert!(c.validate(false).unwrap().is_empty());
    }

    #[test]
    fn file_values_and_overrides() {
        let c = ExperimentConfig::from_toml_str(
            "vocab = 16\ndecoders = [\"ar\", \"sjd-vp\"]\nseeds = \"3..6\"\n",
        )
        .unwrap();
        assert_eq!(c.vocab, 16);
        assert_eq!(c.decoders, vec![DecoderKind::Ar, DecoderKind::SjdVp]);
        assert_eq!(c.seeds.expand().unwrap(), vec![3, 4, 5]);

        let mut t = toml::Table::new();
        apply_override(&mut t, "gamma=0.5").unwrap();
        apply_override(&mut t, "verify = paper").unwrap();
        let c = ExperimentConfig::from_table(t).unwrap();
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.verify, VerifyMode::Paper);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("gama = 0.5"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn growth_steps_beyond_history_rejected_unless_relaxed() {
        let c = ExperimentConfig {
            growth_steps: 4,
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(false), Err(CliError::Config(_))));
        assert_eq!(c.validate(true).unwrap().len(), 1);
        let gamma_one = ExperimentConfig {
            gamma: 1.0,
            ..ExperimentConfig::default()
        };
        assert!(c.validate(false).is_err());
        assert_eq!(gamma_one.validate(true).unwrap().len(), 1);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            prompts: 7,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), ExperimentConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
