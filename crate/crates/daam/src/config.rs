//! One JSON document describing a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthetic::GenConfig;
use crate::trainer::TrainConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Data generation, network, training and evaluation settings. The
/// top-level `seed` overrides the seeds of the nested sections, so every
/// random choice flows from it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub train: TrainConfig,
    /// Artifact directory; not part of the hash.
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copy with nested seeds set from the top-level seed, validated.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.data.seed = c.seed;
        c.train.seed = c.seed;
        c.data.validate()?;
        c.train.validate()?;
        c.train.network.validate(c.data.height, c.data.width)?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON of every result-affecting field.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"sede": 3}"#), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"train": {"iterations": 2, "batchsize": 4}}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"seed": 3, "train": {"iterations": 2}}"#).unwrap();
        assert_eq!((c.seed, c.train.iterations, c.train.epochs_per_iteration), (3, 2, 40));
    }

    #[test]
    fn seed_flows_everywhere() {
        let c = ExperimentConfig { seed: 9, ..Default::default() }.resolved().unwrap();
        assert_eq!((c.data.seed, c.train.seed), (9, 9));
    }

    #[test]
    fn hash_covers_results_not_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out: Some("elsewhere".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.lr.base = 2e-3;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.data.delta = 0.5;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn json_round_trip() {
        let a = ExperimentConfig { seed: 4, ..Default::default() };
        assert_eq!(ExperimentConfig::from_json(&a.to_json().unwrap()).unwrap(), a);
    }
}
