//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::BlockConfig;
use crate::harness::data::SyntheticTaskSpec;
use crate::harness::rng::derive_seed;
use crate::harness::train::TrainConfig;
use crate::model::{FuserKind, ModelConfig};
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub fusers: Vec<FuserKind>,
    /// Replicates use seeds `seed, seed + 1, ...`.
    pub seeds: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { fusers: FuserKind::ALL.to_vec(), seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub fuser: FuserKind,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub task: SyntheticTaskSpec,
    pub train: TrainConfig,
    pub block: BlockConfig,
    /// Number of 1×1 projections in the zero-padding baseline.
    pub conv_depth: usize,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            fuser: FuserKind::Tfusion,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
            task: SyntheticTaskSpec::default(),
            train: TrainConfig::default(),
            block: BlockConfig { depth: 2, ..BlockConfig::default() },
            conv_depth: 1,
            compare: CompareConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config { path: if path == "." { String::new() } else { path }, msg: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        self.block.stack().validate().map_err(|e| Error::Config { path: "block".into(), msg: e.to_string() })?;
        if self.block.channels != self.task.channels {
            return Err(Error::Config {
                path: "block.channels".into(),
                msg: format!("block width {} differs from task channels {}", self.block.channels, self.task.channels),
            });
        }
        if self.conv_depth == 0 {
            return Err(Error::Config { path: "conv_depth".into(), msg: "must be positive".into() });
        }
        if self.compare.seeds == 0 {
            return Err(Error::Config { path: "compare.seeds".into(), msg: "must be positive".into() });
        }
        Ok(())
    }

    /// Fills component seeds left unset from named streams of `seed`.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.task.seed.get_or_insert(derive_seed(self.seed, "data"));
        out.train.seed.get_or_insert(derive_seed(self.seed, "train"));
        out
    }

    /// Same experiment under another top-level seed; seeds that were derived
    /// from the old one are re-derived, explicitly pinned ones are kept.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        if out.task.seed == Some(derive_seed(self.seed, "data")) {
            out.task.seed = None;
        }
        if out.train.seed == Some(derive_seed(self.seed, "train")) {
            out.train.seed = None;
        }
        out.seed = seed;
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            fuser: self.fuser,
            total: self.task.modalities,
            channels: self.task.channels,
            feature_shape: self.task.feature_shape.clone(),
            num_classes: self.task.num_classes,
            block: self.block.clone(),
            conv_depth: self.conv_depth,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.block.depth, 2);
        assert_eq!(cfg.train.lr, 1e-4);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = ExperimentConfig::from_json(r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).unwrap_err();
        match err {
            Error::Config { path, msg } => {
                assert_eq!(path, "train.momentum");
                assert!(msg.contains("momentum"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_enum_and_semantic_errors() {
        let err = ExperimentConfig::from_json(r#"{"fuser": "median"}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "fuser"));
        let err = ExperimentConfig::from_json(r#"{"train": {"lr": -1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train.lr"));
        let err = ExperimentConfig::from_json(r#"{"task": {"channels": 8}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "block.channels"));
    }

    #[test]
    fn resolution_is_deterministic_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        let r = cfg.resolved();
        assert_eq!(r, cfg.resolved());
        assert!(r.task.seed.is_some() && r.train.seed.is_some());
        assert_eq!(ExperimentConfig::from_json(&r.to_json()).unwrap(), r);
        let moved = r.with_seed(9).resolved();
        assert_ne!(moved.task.seed, r.task.seed);
        let pinned = ExperimentConfig {
            task: SyntheticTaskSpec { seed: Some(77), ..SyntheticTaskSpec::default() },
            ..ExperimentConfig::default()
        };
        assert_eq!(pinned.with_seed(9).resolved().task.seed, Some(77));
    }
}
