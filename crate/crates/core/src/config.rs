//! Layered run configuration: TOML file, then dotted `key=value` overrides,
//! then validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::boundary::THRESHOLD_GRID;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::metrics::{default_offsets, ProbeConfig, TOLERANCE_MS};
use crate::model::{ModelConfig, HOP_MS};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus manifest; relative paths resolve against the working
    /// directory.
    pub manifest: Option<PathBuf>,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            n_train: 200,
            n_valid: 25,
            n_test: 50,
            synth: SynthSpec::default(),
        }
    }
}

/// Frame representation handed to the probe and to ABX.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Encoder output `z`.
    Latent,
    /// Context-builder output `c`, or `z` when there is none.
    Context,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerance_ms: i64,
    pub offset_ms: i64,
    pub offsets: Vec<i64>,
    /// Prominence grid searched on the validation split; empty keeps the
    /// model's detector setting.
    pub threshold_grid: Vec<f64>,
    pub representation: Representation,
    pub probe: ProbeConfig,
    pub abx_triples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerance_ms: TOLERANCE_MS,
            offset_ms: 0,
            offsets: default_offsets(),
            threshold_grid: THRESHOLD_GRID.to_vec(),
            representation: Representation::Context,
            probe: ProbeConfig::default(),
            abx_triples: 2000,
            seed: 0,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.tolerance_ms < 0 {
            return Err(Error::config("eval.tolerance_ms", "must be non-negative"));
        }
        let hop = HOP_MS as i64;
        if e.offset_ms % hop != 0 {
            return Err(Error::config("eval.offset_ms", format!("must be a multiple of {hop}")));
        }
        if e.offsets.is_empty() || e.offsets.iter().any(|o| o % hop != 0) {
            return Err(Error::config(
                "eval.offsets",
                format!("must be a nonempty list of multiples of {hop}"),
            ));
        }
        if e.threshold_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::config("eval.threshold_grid", "thresholds must be finite and non-negative"));
        }
        if e.probe.batch_size == 0 {
            return Err(Error::config("eval.probe.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.seed = seed;
        self.eval.probe.seed = seed;
        self.data.synth.seed = seed;
    }
}

/// Parses TOML text, applies `key=value` overrides in order and validates.
///
/// Override values are read as TOML literals when they parse as one and
/// as bare strings otherwise. Errors name the offending key path.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<Config> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().trim().to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let config: Config = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::config(if path == "." { "<root>".into() } else { path }, inner.message().trim().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(ov, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let slot = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| {
            Error::config(parts[..=i].join("."), "is not a table and cannot hold sub-keys")
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("", &[]).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!((c.model.k, c.model.m, c.model.k_s, c.model.m_s), (6, 12, 2, 4));
        assert_eq!((c.train.batch_size, c.train.epochs), (32, 50));
    }

    #[test]
    fn overrides_are_typed_and_idempotent() {
        let ov = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let c = parse_config("[train]\nseed = 3\n", &ov(&["train.seed=7", "train.seed=7"])).unwrap();
        assert_eq!(c.train.seed, 7);
        let e = parse_config("", &ov(&["model.K=13"])).unwrap_err();
        assert_eq!(key_of(e), "model.K");
        let e = parse_config("", &ov(&["train.seed=abc"])).unwrap_err();
        assert_eq!(key_of(e), "train.seed");
        let c = parse_config("", &ov(&["eval.representation=latent", "model.head_kind=\"linear\""])).unwrap();
        assert_eq!(c.eval.representation, Representation::Latent);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let e = parse_config("[model]\nbogus = 1\n", &[]).unwrap_err();
        assert_eq!(key_of(e), "model.bogus");
        let e = parse_config("[model.encoder]\nchannels = \"x\"\n", &[]).unwrap_err();
        assert_eq!(key_of(e), "model.encoder.channels");
        assert!(parse_config("[eval]\noffset_ms = 5\n", &[]).is_err());
        assert!(parse_config("not toml [", &[]).is_err());
    }
}
