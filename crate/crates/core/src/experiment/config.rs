//! Experiment configuration: JSON schema, dotted overrides and hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{RatingFormat, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::RecallMode;
use crate::training::TrainConfig;

/// Environment variable naming the directory relative dataset paths are
/// resolved against.
pub const DATA_ROOT_ENV: &str = "DRCVR_DATA_ROOT";

/// `$DRCVR_DATA_ROOT`, else `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Resolves a dataset path: absolute paths are kept, relative ones are
/// joined to the data root.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        data_root().join(path)
    }
}

fn default_triples() -> RatingFormat {
    RatingFormat::Triples
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Simulated clicks and conversions over a full rating matrix fitted to
    /// an explicit rating file.
    SemiSynthetic {
        ratings: PathBuf,
        #[serde(default = "default_triples")]
        format: RatingFormat,
        #[serde(default)]
        synth: SynthConfig,
        /// Draw a fresh world for every run seed instead of `synth.seed`.
        #[serde(default = "default_true")]
        resample_per_seed: bool,
    },
    /// MNAR training ratings with a MAR test file.
    Real {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_triples")]
        format: RatingFormat,
        #[serde(default)]
        split_seed: u64,
    },
    /// A directory written by `synth`.
    Dump { dir: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SemiSynthetic {
            ratings: PathBuf::from("ml-100k/u.data"),
            format: RatingFormat::Triples,
            synth: SynthConfig::default(),
            resample_per_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cutoffs of DCG@K and Recall@K on real data.
    pub ks: Vec<usize>,
    pub recall_mode: RecallMode,
    /// Report of a baseline run to test against, paired by seed.
    pub baseline: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![2, 4, 6], recall_mode: RecallMode::HitCount, baseline: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthJob {
    /// One output directory per value; empty means `dataset.synth.rho` only.
    pub rhos: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Dotted config key → candidate values. Keys are swept as a Cartesian
    /// product.
    pub grid: BTreeMap<String, Vec<serde_json::Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub closed_form_instances: usize,
    pub closed_form_max_pairs: usize,
    pub robustness_instances: usize,
    pub coverage_trials: usize,
    pub coverage_pairs: usize,
    pub coverage_hypotheses: usize,
    pub coverage_eta: f64,
    pub hoeffding_trials: usize,
    pub hypergradient_outer_steps: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            closed_form_instances: 200,
            closed_form_max_pairs: 12,
            robustness_instances: 100,
            coverage_trials: 10_000,
            coverage_pairs: 8,
            coverage_hypotheses: 4,
            coverage_eta: 0.1,
            hoeffding_trials: 20_000,
            hypergradient_outer_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    pub synth: SynthJob,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            seeds: (0..10).collect(),
            eval: EvalConfig::default(),
            synth: SynthJob::default(),
            sweep: SweepConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::validation("seeds must be distinct"));
        }
        if self.eval.ks.contains(&0) {
            return Err(Error::validation("eval.ks must be at least 1"));
        }
        if let DatasetSpec::SemiSynthetic { synth, .. } = &self.dataset {
            synth.validate()?;
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Applies `key=value` overrides. Values are parsed as JSON and fall back
    /// to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = self.to_value();
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) =
                item.split_once('=').ok_or_else(|| Error::validation(format!("override `{item}` is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        Self::from_value(value)
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_value()).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("config serialises");
        s.push('\n');
        s
    }
}

/// Sets a dotted key inside a JSON object, creating intermediate objects.
/// A key that does not exist on the final object is still inserted so the
/// schema check can reject it with serde's message.
pub fn set_path(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::validation(format!("malformed config key `{key}`")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::validation(format!("config key `{key}`: `{part}` is not inside an object")))?;
        cur = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::validation(format!("config key `{key}` does not point into an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Estimator;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_pretty_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["train.estimator=mrdr", "train.lambda.fixed=0.25", "seeds=[3,4]", "dataset.synth.rho=2"])
            .unwrap();
        assert_eq!(cfg.train.estimator, Estimator::Mrdr);
        assert_eq!(cfg.train.lambda.fixed, 0.25);
        assert_eq!(cfg.seeds, vec![3, 4]);
        let DatasetSpec::SemiSynthetic { synth, .. } = &cfg.dataset else { panic!() };
        assert_eq!(synth.rho, 2.0);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = ExperimentConfig::default();
        assert!(base.with_overrides(&["train.bogus=1"]).is_err());
        assert!(base.with_overrides(&["train.learning_rate=-1"]).is_err());
        assert!(base.with_overrides(&["train.sample_ratio=3"]).is_err());
        assert!(base.with_overrides(&["seeds=[]"]).is_err());
        assert!(base.with_overrides(&["no_equals_sign"]).is_err());
        assert!(ExperimentConfig::from_json(r#"{"surprise": true}"#).is_err());
    }

    #[test]
    fn dataset_kinds_parse() {
        let cfg = ExperimentConfig::from_json(
            r#"{"dataset": {"kind": "real", "train": "coat/train.ascii", "test": "coat/test.ascii", "format": "dense"}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.dataset, DatasetSpec::Real { format: RatingFormat::Dense, .. }));
        assert!(ExperimentConfig::from_json(r#"{"dataset": {"kind": "dump", "dir": "x", "extra": 1}}"#).is_err());
    }

    #[test]
    fn relative_paths_use_the_data_root() {
        assert_eq!(resolve_data_path(Path::new("/abs/file")), PathBuf::from("/abs/file"));
        assert!(resolve_data_path(Path::new("ml-100k/u.data")).ends_with("ml-100k/u.data"));
    }
}
