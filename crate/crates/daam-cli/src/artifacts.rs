//! Artifact directories and the files written into them.

use std::fs;
use std::path::Path;

use daam::config::{sha256_hex, ExperimentConfig};
use daam::losses::LossBreakdown;
use daam::metrics::MetricsReport;
use daam::synthetic::{GenConfig, GeneratedData, SPLIT_FILES};
use daam::trainer::LossRecord;
use daam::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.json";
pub const HASH_FILE: &str = "config.sha256";
pub const DATA_MANIFEST: &str = "manifest.json";

/// Whether an existing directory written under the same config may be
/// reused without `--force`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reuse {
    Refuse,
    SameConfig,
}

/// Creates `dir` and records the resolved config and its hash. A directory
/// that already holds a config is refused unless `force`, or unless its
/// hash matches and `reuse` allows that.
pub fn prepare(dir: &Path, config: &ExperimentConfig, force: bool, reuse: Reuse) -> Result<()> {
    let hash = config.hash();
    let hash_path = dir.join(HASH_FILE);
    if hash_path.exists() && !force {
        let existing = fs::read_to_string(&hash_path)?.trim().to_string();
        if existing != hash {
            return Err(Error::Config(format!(
                "{} holds results for config {existing}, not {hash}; pass --force to overwrite",
                dir.display()
            )));
        }
        if reuse == Reuse::Refuse {
            return Err(Error::Config(format!(
                "{} already holds results for this config ({hash}); pass --force to rerun",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_json()? + "\n")?;
    fs::write(hash_path, format!("{hash}\n"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub file: String,
    pub sha256: String,
    pub n_samples: usize,
    pub n_identities: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub config: GenConfig,
    pub splits: Vec<SplitEntry>,
}

pub fn save_data(dir: &Path, data: &GeneratedData, config: &GenConfig) -> Result<DataManifest> {
    data.save(dir)?;
    let mut splits = Vec::new();
    for (d, file) in data.datasets().into_iter().zip(SPLIT_FILES) {
        splits.push(SplitEntry {
            file: file.to_string(),
            sha256: sha256_hex(&fs::read(dir.join(file))?),
            n_samples: d.len(),
            n_identities: d.manifest.n_identities,
        });
    }
    let manifest = DataManifest { config: config.clone(), splits };
    fs::write(dir.join(DATA_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Loads a `gen` directory after checking file hashes and that it was
/// generated under `expected`.
pub fn load_data(dir: &Path, expected: &GenConfig) -> Result<GeneratedData> {
    let path = dir.join(DATA_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: DataManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if &manifest.config != expected {
        return Err(Error::Config(format!(
            "{} was generated under a different data config than the experiment's",
            dir.display()
        )));
    }
    for s in &manifest.splits {
        let bytes = fs::read(dir.join(&s.file)).map_err(|e| Error::Data(format!("{}: {e}", s.file)))?;
        if sha256_hex(&bytes) != s.sha256 {
            return Err(Error::Integrity(format!("{} does not match its manifest hash", s.file)));
        }
    }
    GeneratedData::load(dir)
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn losses_csv(history: &[LossRecord]) -> String {
    let mut s = format!("{},lr\n", LossBreakdown::CSV_HEADER);
    for r in history {
        s.push_str(&format!("{},{:e}\n", r.losses.csv_row(r.iteration, r.epoch, r.step), r.lr));
    }
    s
}
