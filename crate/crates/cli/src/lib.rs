//! Run configuration (flat `key=value` files with dotted namespaces, flag
//! overrides, deterministic echo) and the figure-ready metrics table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use s2t_core::eval::{EvalReport, MeteorParams};
use s2t_core::features::FrontendConfig;
use s2t_core::model::ModelConfig;
use s2t_core::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: expected key=value, got {text:?}")]
    Syntax {
        path: PathBuf,
        line: usize,
        text: String,
    },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Feature-preparation options on top of the filterbank frontend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareSection {
    /// Stack first-order deltas onto the base features (doubling their
    /// dimension; set model.n_mels to match).
    pub deltas: bool,
    pub delta_window: usize,
}

impl Default for PrepareSection {
    fn default() -> Self {
        PrepareSection {
            deltas: false,
            delta_window: 2,
        }
    }
}

/// Vocabulary construction options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    /// Minimum training-corpus count for a token to receive an id.
    pub min_count: u64,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { min_count: 1 }
    }
}

/// Synthetic-corpus generation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Training utterances to generate.
    pub n_utts: usize,
    /// Additional held-out dev utterances drawn from the same lexicon.
    pub dev_utts: usize,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub frames_per_word_min: usize,
    pub frames_per_word_max: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_utts: 50,
            dev_utts: 5,
            vocab_size: 30,
            len_min: 4,
            len_max: 8,
            frames_per_word_min: 8,
            frames_per_word_max: 15,
            noise: 0.05,
            seed: 42,
        }
    }
}

/// Data-ablation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Corpus fractions to train on, each in (0, 1].
    pub fractions: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            fractions: vec![0.125, 0.25, 0.5, 1.0],
        }
    }
}

/// Input-file locations, resolved relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train_manifest: String,
    pub dev_manifest: String,
    /// Directory that manifest `features` entries are relative to.
    pub feature_root: String,
    pub vocab: String,
    /// Synonym groups for METEOR matching; empty disables the stage.
    pub synonyms: String,
    /// Paraphrase groups for METEOR matching; empty disables the stage.
    pub paraphrases: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train_manifest: "train.jsonl".into(),
            dev_manifest: "dev.jsonl".into(),
            feature_root: "features".into(),
            vocab: "vocab.txt".into(),
            synonyms: String::new(),
            paraphrases: String::new(),
        }
    }
}

/// The fully merged configuration of one run. Every subcommand resolves one
/// of these from defaults, an optional config file, and flag overrides, and
/// echoes it into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub prepare: PrepareSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metric: MeteorParams,
    pub vocab: VocabSection,
    pub synth: SynthSection,
    pub ablate: AblateSection,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Cross-field validation. `model.vocab_size = 0` is allowed here and
    /// means "derive from the vocabulary file at load time".
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        if self.train.level != self.model.decoder_level {
            return Err(ConfigError::Invalid(format!(
                "train.level ({}) must match model.decoder_level ({})",
                self.train.level, self.model.decoder_level
            )));
        }
        if !(0.0..=1.0).contains(&self.metric.alpha) {
            return Err(ConfigError::Invalid(format!(
                "metric.alpha must lie in [0, 1], got {}",
                self.metric.alpha
            )));
        }
        for (key, v) in [
            ("metric.beta", self.metric.beta),
            ("metric.gamma", self.metric.gamma),
        ] {
            if !(v >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "{key} must be non-negative, got {v}"
                )));
            }
        }
        if self.ablate.fractions.is_empty() {
            return Err(ConfigError::Invalid(
                "ablate.fractions must name at least one fraction".into(),
            ));
        }
        for &f in &self.ablate.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ConfigError::Invalid(format!(
                    "ablate.fractions entries must lie in (0, 1], got {f}"
                )));
            }
        }
        let s = &self.synth;
        if s.n_utts == 0 || s.vocab_size == 0 {
            return Err(ConfigError::Invalid(
                "synth.n_utts and synth.vocab_size must be positive".into(),
            ));
        }
        if s.len_min == 0 || s.len_min > s.len_max {
            return Err(ConfigError::Invalid(format!(
                "synth.len_min..synth.len_max must be a non-empty range from 1, got {}..{}",
                s.len_min, s.len_max
            )));
        }
        if s.frames_per_word_min == 0 || s.frames_per_word_min > s.frames_per_word_max {
            return Err(ConfigError::Invalid(format!(
                "synth.frames_per_word_min..max must be a non-empty range from 1, got {}..{}",
                s.frames_per_word_min, s.frames_per_word_max
            )));
        }
        if !(s.noise >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "synth.noise must be non-negative, got {}",
                s.noise
            )));
        }
        if self.prepare.delta_window == 0 {
            return Err(ConfigError::Invalid(
                "prepare.delta_window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Splits config-file text into (key, value) pairs. Blank lines and lines
/// starting with `#` are ignored; everything after the first `=` is the
/// value, with surrounding whitespace trimmed.
pub fn config_entries(text: &str, path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) if !key.trim().is_empty() => {
                entries.push((key.trim().to_string(), value.trim().to_string()));
            }
            _ => {
                return Err(ConfigError::Syntax {
                    path: path.to_path_buf(),
                    line: i + 1,
                    text: line.to_string(),
                })
            }
        }
    }
    Ok(entries)
}

fn parse_number(raw: &str, key: &str) -> Result<Value, ConfigError> {
    if let Ok(n) = raw.parse::<i64>() {
        return Ok(Value::from(n));
    }
    if let Ok(n) = raw.parse::<u64>() {
        return Ok(Value::from(n));
    }
    match raw.parse::<f64>() {
        Ok(n) if n.is_finite() => Ok(Value::from(n)),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("expected a number, got {raw:?}"),
        }),
    }
}

/// Parses `raw` into the JSON shape that the defaults tree holds at this key.
fn coerce(schema: &Value, raw: &str, key: &str) -> Result<Value, ConfigError> {
    match schema {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| {
            ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("expected true or false, got {raw:?}"),
            }
        }),
        Value::Number(_) => parse_number(raw, key),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Null => {
            if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
                Ok(Value::Null)
            } else {
                parse_number(raw, key)
            }
        }
        Value::Array(_) => {
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            raw.split(',')
                .map(|part| parse_number(part.trim(), key))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Object(_) => Err(ConfigError::BadValue {
            key: key.to_string(),
            reason: "names a config section, not a value".into(),
        }),
    }
}

fn set_key(tree: &mut Value, schema: &Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let unknown = || ConfigError::UnknownKey {
        key: key.to_string(),
    };
    let mut node = &mut *tree;
    let mut schema_node = schema;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(unknown)?;
        schema_node = schema_node
            .as_object()
            .and_then(|m| m.get(part))
            .ok_or_else(unknown)?;
    }
    *node = coerce(schema_node, raw, key)?;
    Ok(())
}

/// Resolves a run configuration: defaults, then the config file, then the
/// flag overrides, in that order. The result is validated.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let schema = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut tree = schema.clone();

    let mut entries = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        entries.extend(config_entries(&text, path)?);
    }
    entries.extend(overrides.iter().cloned());
    for (key, raw) in &entries {
        set_key(&mut tree, &schema, key, raw)?;
    }

    let cfg: RunConfig =
        serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn render_scalar(v: &Value) -> String {
    match v {
        Value::Null => "none".to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(render_scalar)
            .collect::<Vec<_>>()
            .join(","),
        Value::Object(_) => unreachable!("sections are flattened before rendering"),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix}={}", render_scalar(other))),
    }
}

/// Renders the resolved configuration as sorted `key=value` lines. The text
/// parses back to an equal configuration, and equal configurations render to
/// byte-identical text.
pub fn render_config(cfg: &RunConfig) -> String {
    let tree = serde_json::to_value(cfg).expect("config serializes");
    let mut lines = Vec::new();
    flatten("", &tree, &mut lines);
    lines.sort();
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

/// One data point of the metrics table: the evaluation of one trained model.
pub struct MetricsRow<'a> {
    /// Training-audio hours behind the model.
    pub hours: f64,
    /// Model/decoding variant label, e.g. `word-bi-beam`.
    pub variant: String,
    pub report: &'a EvalReport,
}

/// Renders evaluation reports as a figure-ready CSV, sorted by training
/// hours ascending (ties keep input order). Re-emission over the same rows
/// is byte-identical.
pub fn emit_metrics_table(rows: &[MetricsRow]) -> String {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].hours.total_cmp(&rows[b].hours));
    let mut out = String::from("hours,bleu,meteor,precision,recall_staged,recall_exact,variant\n");
    for i in order {
        let r = &rows[i];
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.hours,
            r.report.bleu,
            r.report.meteor,
            r.report.precision_unigram,
            r.report.recall_staged,
            r.report.recall_exact,
            r.variant
        ));
    }
    out
}
