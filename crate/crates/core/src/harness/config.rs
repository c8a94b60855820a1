use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::text::SynthSpec;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// The JSON document every command reads.
///
/// Unknown keys anywhere are rejected. Everything not listed as required
/// falls back to the library defaults, so `{"output_dir": "runs",
/// "seeds": [0], "data": {"synth": {}}}` is a complete config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Write the first-epoch augmented corpus of augmented runs as JSONL.
    #[serde(default)]
    pub dump_augmented: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth(SynthData),
    Jsonl(JsonlData),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthData {
    /// Fixed across run seeds: seeds vary training, not the benchmark.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub spec: SynthSpec,
}

/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlData {
    pub source: PathBuf,
    /// Labelled target pool; training draws `n_per_class` from it.
    pub target: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
}

impl JsonlData {
    fn paths(&self) -> [(&'static str, &Path); 4] {
        [
            ("source", &self.source),
            ("target", &self.target),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.source,
            &mut self.target,
            &mut self.validation,
            &mut self.test,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Grids of the `sweep` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n_per_class: Vec<usize>,
    pub alpha: Vec<f64>,
    pub temperature: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_per_class: vec![20, 40, 60, 80],
            alpha: vec![0.6, 0.7, 0.8, 0.9, 1.0],
            temperature: vec![1.0, 2.0, 4.0, 8.0],
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.n_per_class.is_empty() || self.alpha.is_empty() || self.temperature.is_empty() {
            return Err(Error::Config("sweep grids must be non-empty".into()));
        }
        if self.n_per_class.contains(&0) {
            return Err(Error::Config("sweep.n_per_class entries must be at least 1".into()));
        }
        if self.alpha.iter().chain(&self.temperature).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "sweep.alpha and sweep.temperature entries must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Parses and validates a config document. Schema violations carry the
    /// dotted path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let config: RunConfig =
            serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        de.end().map_err(|e| Error::Schema {
            path: ".".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        if let DataConfig::Jsonl(j) = &mut config.data {
            j.resolve(path.parent().unwrap_or(Path::new(".")));
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let DataConfig::Synth(s) = &self.data {
            s.spec
                .validate()
                .map_err(|e| Error::Config(format!("data.synth.spec: {e}")))?;
        }
        self.sweep.validate()?;
        self.train.validate()
    }

    /// Identity of the input data for hashing: the synth spec itself, or
    /// digests of the JSONL file contents so moving a file does not
    /// invalidate its runs.
    pub fn data_identity(&self) -> Result<serde_json::Value> {
        match &self.data {
            DataConfig::Synth(s) => Ok(serde_json::json!({ "synth": s })),
            DataConfig::Jsonl(j) => {
                let mut map = serde_json::Map::new();
                for (name, path) in j.paths() {
                    let bytes = fs::read(path).map_err(|e| {
                        Error::Config(format!("data.jsonl.{name}: {}: {e}", path.display()))
                    })?;
                    map.insert(name.into(), hex::encode(Sha256::digest(&bytes)).into());
                }
                Ok(serde_json::json!({ "jsonl": map }))
            }
        }
    }
}

/// Short digest of a canonical JSON rendering. Object keys serialize
/// sorted, so field order in the source document does not matter.
pub fn config_hash<T: Serialize>(scope: &T) -> Result<String> {
    let canonical = serde_json::to_vec(&serde_json::to_value(scope)?)?;
    Ok(hex::encode(&Sha256::digest(&canonical)[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"output_dir": "runs", "seeds": [0], "data": {"synth": {}}}"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.sweep.n_per_class, vec![20, 40, 60, 80]);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = r#"{"output_dir": "o", "seeds": [0], "data": {"synth": {}},
                      "train": {"kd": {"temperature": "hot"}}}"#;
        match RunConfig::from_json(bad) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "train.kd.temperature"),
            other => panic!("{other:?}"),
        }
        let unknown = r#"{"output_dir": "o", "seeds": [0], "data": {"synth": {}},
                          "train": {"selector": {"gama": 0.9}}}"#;
        match RunConfig::from_json(unknown) {
            Err(Error::Schema { path, message }) => {
                assert!(path.starts_with("train.selector"), "{path}");
                assert!(message.contains("gama"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_validation_is_a_config_error() {
        let e = RunConfig::from_json(
            r#"{"output_dir": "o", "seeds": [1, 1], "data": {"synth": {}}}"#,
        )
        .unwrap_err();
        assert!(e.is_config_error());
    }

    #[test]
    fn hash_ignores_key_order_and_number_spelling() {
        let a = serde_json::json!({"a": 1.0, "b": [1, 2]});
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [1, 2], "a": 1.0}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        let c = RunConfig::from_json(MINIMAL).unwrap();
        let mut d = c.clone();
        d.train.kd.temperature = 1.0;
        assert_eq!(config_hash(&c.train).unwrap(), config_hash(&d.train).unwrap());
        d.train.kd.temperature = 2.0;
        assert_ne!(config_hash(&c.train).unwrap(), config_hash(&d.train).unwrap());
    }
}
