//! Experiment configs: one JSON file per run, diffable and hashable.

use std::fs;
use std::path::{Path, PathBuf};

use palsy::dataset::{self, LabelField, Manifest, SyntheticConfig, MANIFEST_FILE};
use palsy::trainer::OptimizerConfig;
use palsy::NetworkSpec;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const SEED_ENV: &str = "PALSY_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_task")]
    pub task: LabelField,
    /// Directory holding `manifest.json`; `generate` writes here.
    pub dataset_dir: PathBuf,
    /// Used by `generate` only.
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// `desk` or `full`.
    #[serde(default = "default_network")]
    pub network: String,
    pub output_dir: PathBuf,
    /// Seeds training and evaluation; replaces `optimizer.seed`.
    #[serde(default)]
    pub seed: u64,
    /// Clip lengths of the frame-duration ablation.
    #[serde(default = "default_durations")]
    pub durations: Vec<usize>,
}

fn default_task() -> LabelField {
    LabelField::Motion
}

fn default_network() -> String {
    "desk".into()
}

fn default_durations() -> Vec<usize> {
    vec![8, 12, 16]
}

impl RunConfig {
    /// Reads and parses `path`, then applies the seed override.
    pub fn load(path: &Path, seed_override: Option<&str>) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            cfg.seed = s.trim().parse().map_err(|_| {
                Failure::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))
            })?;
        }
        cfg.optimizer.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, Failure> {
        let spec = NetworkSpec::by_name(&self.network, self.task.classes())?
            .with_frames(self.optimizer.frames);
        spec.validate()?;
        Ok(spec)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset_dir.join(MANIFEST_FILE)
    }

    /// Checks everything a training command needs before any compute:
    /// optimizer and network settings, the manifest, and the output
    /// directory.
    pub fn validate_for_training(&self) -> Result<(NetworkSpec, Manifest), Failure> {
        self.optimizer.validate()?;
        let spec = self.network_spec()?;
        if self.durations.is_empty() || self.durations.contains(&0) {
            return Err(Failure::Config("durations must be nonempty and ≥ 1".into()));
        }
        let path = self.manifest_path();
        if !path.is_file() {
            return Err(Failure::Config(format!(
                "no manifest at {}",
                path.display()
            )));
        }
        let manifest = dataset::load_manifest(&path).map_err(|e| Failure::Config(e.to_string()))?;
        for r in &manifest.records {
            let clip = self.dataset_dir.join(&r.path);
            if !clip.is_file() {
                return Err(Failure::Config(format!(
                    "manifest lists missing clip {}",
                    clip.display()
                )));
            }
        }
        self.prepare_output()?;
        Ok((spec, manifest))
    }

    pub fn prepare_output(&self) -> Result<(), Failure> {
        fs::create_dir_all(&self.output_dir)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", self.output_dir.display())))
    }
}
