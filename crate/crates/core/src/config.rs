//! Run configuration: a sectioned TOML file (`[data]`, `[model]`, `[train]`,
//! `[eval]`, `[sweep]`) with `--section.key=value` command-line overrides
//! applied to the raw document before type resolution. The resolved document
//! is echoed into every output artifact.
//!
//! The `[train]` section holds every trainer field except the backbone,
//! which lives in `[model]`; the two are merged during resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticSpec;
use crate::error::{MmlError, Result};
use crate::evalkit::SweepParameter;
use crate::trainer::TrainConfig;

const SECTIONS: [&str; 5] = ["data", "model", "train", "eval", "sweep"];

/// Pair scoring rule. Cosine is implemented as squared Euclidean distance
/// between L2-normalized embeddings, which preserves its ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SqEuclidean,
    Cosine,
}

/// Evaluation protocol switches. Verification runs whenever pairs are
/// requested; CMC runs whenever `cmc_probe_ids > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_pairs")]
    pub num_pos: usize,
    #[serde(default = "default_pairs")]
    pub num_neg: usize,
    #[serde(default)]
    pub pair_seed: u64,
    #[serde(default = "default_far_levels")]
    pub far_levels: Vec<f64>,
    #[serde(default)]
    pub cmc_probe_ids: usize,
    #[serde(default)]
    pub cmc_distractors: usize,
    #[serde(default)]
    pub protocol_seed: u64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
    /// Histogram range [lo, hi]. No default: the histogram is produced only
    /// when a range is configured, since a sensible range depends on the
    /// embedding scale.
    #[serde(default)]
    pub hist_range: Option<(f64, f64)>,
}

fn default_metric() -> Metric {
    Metric::SqEuclidean
}

fn default_folds() -> usize {
    10
}
fn default_pairs() -> usize {
    300
}
fn default_far_levels() -> Vec<f64> {
    vec![0.1, 0.01]
}
fn default_hist_bins() -> usize {
    10
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: Option<SyntheticSpec>,
    pub train: Option<TrainConfig>,
    pub eval: EvalSection,
    pub sweep: Option<SweepSection>,
    /// Fully resolved document (post-override), for artifact echoing.
    pub resolved: toml::Value,
}

impl RunConfig {
    pub fn data(&self) -> Result<&SyntheticSpec> {
        self.data
            .as_ref()
            .ok_or_else(|| MmlError::Config("missing [data] section".into()))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| MmlError::Config("missing [train] (and [model]) sections".into()))
    }

    pub fn sweep(&self) -> Result<&SweepSection> {
        self.sweep
            .as_ref()
            .ok_or_else(|| MmlError::Config("missing [sweep] section".into()))
    }

    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.resolved).unwrap_or(serde_json::Value::Null)
    }
}

pub fn load_raw(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MmlError::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<toml::Value>()
        .map_err(|e| MmlError::Config(format!("{}: {e}", path.display())))
}

/// Apply one `section.key=value` override in place, creating intermediate
/// tables as needed. The value text is parsed as a TOML literal; text that
/// does not parse as one is taken as a bare string.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| MmlError::Config(format!("override '{spec}' is not key=value")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.len() < 2 || segments.iter().any(|s| s.is_empty()) {
        return Err(MmlError::Config(format!(
            "override key '{path}' must be section.key"
        )));
    }
    if !SECTIONS.contains(&segments[0]) {
        return Err(MmlError::Config(format!(
            "unknown section '{}' in override '{spec}'",
            segments[0]
        )));
    }
    let value = parse_literal(raw_value);

    let mut cursor = doc;
    for &seg in &segments[..segments.len() - 1] {
        let table = cursor.as_table_mut().ok_or_else(|| {
            MmlError::Config(format!("override '{path}' traverses a non-table value"))
        })?;
        cursor = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| {
        MmlError::Config(format!("override '{path}' traverses a non-table value"))
    })?;
    table.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(text: &str) -> toml::Value {
    let probe = format!("v = {text}");
    match probe.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(text.to_string()),
    }
}

/// Type-check the raw document into section structs. Unknown top-level
/// sections and unknown keys inside any section are rejected.
pub fn resolve(doc: toml::Value) -> Result<RunConfig> {
    let table = doc
        .as_table()
        .ok_or_else(|| MmlError::Config("config root must be a table".into()))?;
    for key in table.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            return Err(MmlError::Config(format!("unknown section [{key}]")));
        }
    }

    let data = match table.get("data") {
        Some(v) => Some(
            v.clone()
                .try_into::<SyntheticSpec>()
                .map_err(|e| MmlError::Config(format!("[data]: {e}")))?,
        ),
        None => None,
    };

    let train = match (table.get("train"), table.get("model")) {
        (Some(t), Some(m)) => {
            let mut merged = t
                .as_table()
                .ok_or_else(|| MmlError::Config("[train] must be a table".into()))?
                .clone();
            if merged.contains_key("model") {
                return Err(MmlError::Config(
                    "backbone settings belong in [model], not [train].model".into(),
                ));
            }
            merged.insert("model".into(), m.clone());
            let config = toml::Value::Table(merged)
                .try_into::<TrainConfig>()
                .map_err(|e| MmlError::Config(format!("[train]/[model]: {e}")))?;
            config.validate()?;
            Some(config)
        }
        (Some(_), None) => {
            return Err(MmlError::Config("[train] present but [model] missing".into()))
        }
        (None, Some(_)) => {
            return Err(MmlError::Config("[model] present but [train] missing".into()))
        }
        (None, None) => None,
    };

    let eval = match table.get("eval") {
        Some(v) => v
            .clone()
            .try_into::<EvalSection>()
            .map_err(|e| MmlError::Config(format!("[eval]: {e}")))?,
        None => EvalSection::default(),
    };
    if eval.folds < 2 {
        return Err(MmlError::Config("[eval]: folds must be >= 2".into()));
    }

    let sweep = match table.get("sweep") {
        Some(v) => {
            let s = v
                .clone()
                .try_into::<SweepSection>()
                .map_err(|e| MmlError::Config(format!("[sweep]: {e}")))?;
            if s.values.is_empty() || s.seeds.is_empty() {
                return Err(MmlError::Config(
                    "[sweep]: values and seeds must be nonempty".into(),
                ));
            }
            Some(s)
        }
        None => None,
    };

    if let Some(spec) = &data {
        spec.validate()?;
    }

    Ok(RunConfig {
        data,
        train,
        eval,
        sweep,
        resolved: doc,
    })
}

/// Load a file, apply overrides, resolve.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = load_raw(path)?;
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    resolve(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Scheme;

    const FULL: &str = r#"
[data]
num_classes = 4
input_dim = 6
class_centre_scale = 3.0
noise_sigma = 0.5
tail_exponent = 1.0
min_per_class = 3
total_samples = 40
seed = 7

[model]
input_dim = 6
hidden = [8]
embed_dim = 4

[train]
scheme = "iii"
alpha = 0.1
beta = 0.05
gamma = 0.5
margin = 4.0
batch_size = 8
iterations = 10
base_lr = 0.05
seed = 7

[eval]
folds = 5

[sweep]
parameter = "margin"
values = [0.0, 4.0]
seeds = [1, 2]
"#;

    #[test]
    fn full_document_resolves() {
        let doc: toml::Value = FULL.parse().unwrap();
        let config = resolve(doc).unwrap();
        assert_eq!(config.data().unwrap().num_classes, 4);
        let train = config.train().unwrap();
        assert_eq!(train.scheme, Scheme::III);
        assert_eq!(train.model.hidden, vec![8]);
        assert_eq!(config.eval.folds, 5);
        assert_eq!(config.eval.num_pos, 300);
        assert_eq!(config.sweep().unwrap().values, vec![0.0, 4.0]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc: toml::Value = "[bogus]\nx = 1\n".parse().unwrap();
        assert!(resolve(doc).is_err());

        let mut doc: toml::Value = FULL.parse().unwrap();
        apply_override(&mut doc, "train.unknown_knob=3").unwrap();
        assert!(resolve(doc).is_err());
    }

    #[test]
    fn overrides_apply_and_win() {
        let mut doc: toml::Value = FULL.parse().unwrap();
        apply_override(&mut doc, "train.margin=9.5").unwrap();
        apply_override(&mut doc, "train.scheme=ii").unwrap();
        apply_override(&mut doc, "eval.far_levels=[0.5]").unwrap();
        apply_override(&mut doc, "model.hidden=[16, 8]").unwrap();
        let config = resolve(doc).unwrap();
        let train = config.train().unwrap();
        assert_eq!(train.margin, 9.5);
        assert_eq!(train.scheme, Scheme::II);
        assert_eq!(train.model.hidden, vec![16, 8]);
        assert_eq!(config.eval.far_levels, vec![0.5]);
    }

    #[test]
    fn override_syntax_errors() {
        let mut doc: toml::Value = FULL.parse().unwrap();
        assert!(apply_override(&mut doc, "no_equals").is_err());
        assert!(apply_override(&mut doc, "toplevel=1").is_err());
        assert!(apply_override(&mut doc, "nosuchsection.x=1").is_err());
    }

    #[test]
    fn string_fallback_literal() {
        let mut doc: toml::Value = FULL.parse().unwrap();
        // Bare words are not TOML literals; treated as strings.
        apply_override(&mut doc, "train.scheme=ii").unwrap();
        let train = resolve(doc).unwrap().train.unwrap();
        assert_eq!(train.scheme, Scheme::II);
    }

    #[test]
    fn train_without_model_rejected() {
        let doc: toml::Value = "[train]\nscheme = \"i\"\n".parse().unwrap();
        assert!(resolve(doc).is_err());
    }

    #[test]
    fn echo_round_trips_overrides() {
        let mut doc: toml::Value = FULL.parse().unwrap();
        apply_override(&mut doc, "train.margin=9.5").unwrap();
        let config = resolve(doc).unwrap();
        let echo = config.echo_json();
        assert_eq!(echo["train"]["margin"], serde_json::json!(9.5));
    }
}
