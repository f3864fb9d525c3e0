//! Run configuration: a TOML file, dotted `key=value` overrides on top, then
//! strict deserialization so every unknown or mistyped key is reported by
//! its full path.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use gau_core::analysis::AnalysisKernel;
use gau_core::bench::BenchConfig;
use gau_core::train::{ModelConfig, SyntheticCorpusConfig, TrainConfig, NUM_RESERVED};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// A mistake in the invocation or the configuration, as opposed to a failure
/// while running. Maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces `train.seed` and `bench.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// UTF-8 text, one document per line. Without it a synthetic corpus is
    /// generated from `data.synthetic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Existing `vocab.txt`; built from the corpus when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    /// Trained checkpoint for `analyze`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            vocab: None,
            checkpoint: None,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Share of documents held out for evaluation.
    pub eval_fraction: f64,
    pub max_vocab: usize,
    pub synthetic: SyntheticCorpusConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            eval_fraction: 0.05,
            max_vocab: 8000,
            synthetic: SyntheticCorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub lengths: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: vec![64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Gaussian queries and keys instead of a trained checkpoint.
    pub random_init: bool,
    /// Query/key width for the random source.
    pub s: usize,
    pub layer: usize,
    pub kernels: Vec<AnalysisKernel>,
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            random_init: true,
            s: 128,
            layer: 0,
            kernels: AnalysisKernel::table(),
            lengths: vec![128, 512],
            seeds: (0..5).collect(),
        }
    }
}

impl RunConfig {
    /// Checks everything that does not depend on the data. `vocab_size = 0`
    /// means "take it from the vocabulary".
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = NUM_RESERVED + 1;
        }
        model.validate().context("model")?;
        self.train.validate(&model).context("train")?;
        if !(self.data.eval_fraction > 0.0 && self.data.eval_fraction < 1.0) {
            return Err(usage(format!(
                "data.eval_fraction = {} outside (0, 1)",
                self.data.eval_fraction
            )));
        }
        if self.data.max_vocab <= NUM_RESERVED {
            return Err(usage(format!("data.max_vocab = {} is too small", self.data.max_vocab)));
        }
        if let Some(&n) = self.eval.lengths.iter().find(|&&n| n == 0 || n > model.max_len) {
            return Err(usage(format!(
                "eval.lengths contains {n}, outside 1..={}",
                model.max_len
            )));
        }
        if self.analyze.s == 0 {
            return Err(usage("analyze.s must be positive"));
        }
        if self.analyze.lengths.contains(&0) {
            return Err(usage("analyze.lengths must be positive"));
        }
        self.bench.validate().context("bench")?;
        Ok(())
    }

    /// Propagates the top-level seed.
    fn resolve(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.bench.seed = s;
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serializing the resolved config")
    }

    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string so `paths.corpus=data/zh.txt` works without quotes.
pub fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// `"a.b=1"` into `("a.b", 1)`.
pub fn parse_override(s: &str) -> anyhow::Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("malformed key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut t = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(usage(format!("`{}` is not a table", parts[..=i].join(".")))),
        };
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Reads `path` (or starts empty), applies the overrides in order,
/// deserializes, resolves and validates.
pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> anyhow::Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        set_key(&mut table, k, v.clone())?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let at = e.path().to_string();
        if at == "." {
            usage(format!("invalid config: {}", e.inner()))
        } else {
            usage(format!("invalid config key `{at}`: {}", e.inner()))
        }
    })?;
    cfg.resolve();
    cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> (String, toml::Value) {
        parse_override(s).unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = load(None, &[]).unwrap();
        let text = cfg.to_toml().unwrap();
        let again: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn overrides_apply_and_seed_propagates() {
        let cfg = load(None, &[ov("model.d_h=64"), ov("seed=7"), ov("paths.corpus=data/x.txt")]).unwrap();
        assert_eq!(cfg.model.d_h, 64);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.bench.seed, 7);
        assert_eq!(cfg.paths.corpus.as_deref(), Some(Path::new("data/x.txt")));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = load(None, &[ov("model.d_hh=3")]).unwrap_err().to_string();
        assert!(err.contains("model") && err.contains("d_hh"), "{err}");
        let err = load(None, &[ov("train.peak_lr=\"fast\"")]).unwrap_err().to_string();
        assert!(err.contains("train.peak_lr"), "{err}");
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let err = load(None, &[ov("eval.lengths=[1024]")]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(load(None, &[ov("model.num_layers=0")]).is_err());
        assert!(parse_override("bogus").is_err());
        assert!(load(None, &[ov("model.d_h.x=1")]).is_err());
    }

    #[test]
    fn analysis_kernels_parse_by_name() {
        let cfg = load(None, &[ov("analyze.kernels=[\"qk\", \"softmax_plus\"]")]).unwrap();
        assert_eq!(cfg.analyze.kernels.len(), 2);
        assert!(load(None, &[ov("analyze.kernels=[\"nope\"]")]).is_err());
    }
}
