//! Experiment configuration (TOML) and its content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SynthConfig;
use crate::acquire::AcquisitionMetric;
use crate::augment::AugmentConfig;
use crate::datapool::{DatasetSplits, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::ssl::TrainSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleConfig {
    /// Acquisition rounds; 0 is a plain semi-supervised run.
    pub num_cycles: usize,
    pub per_image_k: usize,
    pub region_h: usize,
    pub region_w: usize,
    pub metric: AcquisitionMetric,
    pub initial_fraction: f64,
    pub replay_capacity: usize,
    pub seed: u64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            num_cycles: 2,
            per_image_k: 4,
            region_h: 30,
            region_w: 30,
            metric: AcquisitionMetric::Entropy,
            initial_fraction: 0.1,
            replay_capacity: 50,
            seed: 0,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_image_k == 0 || self.replay_capacity == 0 || self.region_h == 0 || self.region_w == 0 {
            return Err(Error::invalid("per_image_k, replay_capacity and region size must be positive"));
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction < 1.0) {
            return Err(Error::invalid("initial_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory with `manifest.txt`, `images/` and `labels/`.
    pub dir: Option<PathBuf>,
    /// Generate the dataset instead of reading `dir`.
    pub synthetic: Option<SynthConfig>,
    pub num_classes: usize,
    pub ignore_index: u8,
    /// Pool shape used by bookkeeping-only dry runs when no images are read.
    pub train_images: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synthetic: None,
            num_classes: 4,
            ignore_index: IGNORE_INDEX,
            train_images: 0,
            height: 0,
            width: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<DatasetSplits> {
        match (&self.dir, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::invalid("data.dir and data.synthetic are mutually exclusive")),
            (Some(dir), None) => DatasetSplits::load(dir, self.num_classes, self.ignore_index),
            (None, Some(s)) => {
                if s.num_classes() != self.num_classes {
                    return Err(Error::invalid(format!(
                        "synthetic data has {} classes, config says {}",
                        s.num_classes(),
                        self.num_classes
                    )));
                }
                s.generate_splits()
            }
            (None, None) => Err(Error::invalid("no dataset configured (data.dir or data.synthetic)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: UNetConfig,
    pub cycle: CycleConfig,
    pub schedule: TrainSchedule,
    pub augment: AugmentConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.cycle.validate()?;
        self.schedule.validate()?;
        if self.data.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.synthetic = Some(SynthConfig::default());
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text, Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.cycle.seed = 9;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let p = Path::new("c.toml");
        assert!(matches!(
            ExperimentConfig::from_toml("[cycle]\nregions = 3\n", p),
            Err(Error::Format { .. })
        ));
        assert!(ExperimentConfig::from_toml("[cycle]\nper_image_k = 0\n", p).is_err());
        assert!(ExperimentConfig::from_toml("[schedule]\nconfidence_threshold = 1.0\n", p).is_err());
        let cfg = ExperimentConfig::from_toml("[cycle]\nmetric = \"margin\"\nnum_cycles = 0\n", p).unwrap();
        assert_eq!(cfg.cycle.metric, AcquisitionMetric::Margin);
    }

    #[test]
    fn shipped_presets_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["camvid.toml", "cityscapes.toml", "desk.toml"] {
            ExperimentConfig::load(&dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
