//! Run configuration as JSON with flat dotted keys (`model.d`, `ranker.k`,
//! `train.peak_lr`). Later sources override earlier ones key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Blocks of a byte corpus.
    #[default]
    Corpus,
    /// Generated key-value passkey haystacks.
    Passkey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub corpus: Option<PathBuf>,
    /// Tail share of the corpus kept out of training for evaluation.
    pub holdout: f64,
    pub value_digits: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Corpus,
            corpus: None,
            holdout: 0.1,
            value_digits: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Short names accepted in place of the full key.
const ALIASES: [(&str, &str); 5] = [
    ("ranker.split", "model.split"),
    ("ranker.s", "model.split"),
    ("ranker.k", "model.top_k"),
    ("ranker.causal", "model.causal_rank"),
    ("model.n", "model.seq_len"),
];

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix of a leaf is an object");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn canonical(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key, |(_, k)| k)
}

/// Parse a flag value: JSON when it parses, a plain string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        out
    }

    /// Apply dotted-key overrides; unknown keys are an error.
    pub fn apply(&self, overrides: &Map<String, Value>) -> Result<Self> {
        let mut flat = self.flat();
        for (k, v) in overrides {
            let key = canonical(k);
            match flat.get_mut(key) {
                Some(slot) => *slot = v.clone(),
                // optional entries serialize as null and stay leaves
                None => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Error::Config(format!("bad config value: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Map<String, Value>> {
        let text = std::fs::read_to_string(path)?;
        match serde_json::from_str(&text)? {
            Value::Object(m) => {
                let mut flat = Map::new();
                flatten("", &Value::Object(m), &mut flat);
                Ok(flat)
            }
            _ => Err(Error::Config(format!(
                "{} is not a JSON object",
                path.display()
            ))),
        }
    }

    /// Defaults, then the file, then flag overrides.
    pub fn resolve(file: Option<&Path>, flags: &Map<String, Value>) -> Result<Self> {
        let base = RunConfig::default();
        let base = match file {
            Some(p) => base.apply(&Self::from_file(p)?)?,
            None => base,
        };
        base.apply(flags)
    }

    /// The flat form as pretty JSON, one key per line.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.flat())).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, Value)]) -> Map<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn flat_round_trip() {
        let c = RunConfig::default();
        let back = c.apply(&c.flat()).unwrap();
        assert_eq!(back, c);
        assert!(c.flat().contains_key("model.ablations.no_ranker"));
        assert!(c.flat().contains_key("train.peak_lr"));
    }

    #[test]
    fn precedence_is_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"model.d": 32, "train.peak_lr": 0.002, "ranker.k": 3}"#,
        )
        .unwrap();
        let flags = map(&[("train.peak_lr", Value::from(0.005))]);
        let c = RunConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.top_k, 3);
        assert_eq!(c.train.peak_lr, 0.005);
        assert_eq!(c.model.layers, ModelConfig::default().layers);
    }

    #[test]
    fn nested_files_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"model": {"split": 32}, "data": {"kind": "passkey"}}"#,
        )
        .unwrap();
        let c = RunConfig::resolve(Some(&path), &Map::new()).unwrap();
        assert_eq!(c.model.split, 32);
        assert_eq!(c.data.kind, DataKind::Passkey);
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        let c = RunConfig::default();
        assert!(c.apply(&map(&[("model.depth", Value::from(3))])).is_err());
        assert!(c
            .apply(&map(&[("model.seq_len", Value::from(100))]))
            .is_err());
        assert!(c.apply(&map(&[("model.d", Value::from("wide"))])).is_err());
    }

    #[test]
    fn optional_paths_can_be_set() {
        let c = RunConfig::default()
            .apply(&map(&[("data.corpus", parse_value("a/b.txt"))]))
            .unwrap();
        assert_eq!(c.data.corpus, Some(PathBuf::from("a/b.txt")));
        assert_eq!(parse_value("0.5"), Value::from(0.5));
        assert_eq!(parse_value("true"), Value::Bool(true));
    }
}
