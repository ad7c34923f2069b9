//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Augmentation, DepthBackend, KittiOptions, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evalkit::SEGMENT_LENGTHS;
use crate::loss::LossParams;
use crate::network::ModelConfig;
use crate::train::OptimizerConfig;

/// Overrides the KITTI root directory of the configuration when set.
pub const KITTI_ROOT_ENV: &str = "LVO_KITTI_ROOT";

/// Largest accepted search radius; the cost volume has `(2S+1)²` channels.
pub const MAX_SEARCH_RADIUS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Rendered sequences; a sequence id is the decimal seed of its generator.
    Synthetic {
        #[serde(default)]
        scene: SyntheticConfig,
        train_sequences: Vec<String>,
        #[serde(default)]
        eval_sequences: Vec<String>,
    },
    Kitti {
        root: PathBuf,
        train_sequences: Vec<String>,
        #[serde(default)]
        eval_sequences: Vec<String>,
        #[serde(default)]
        options: KittiOptions,
    },
}

impl DatasetSource {
    pub fn train_sequences(&self) -> &[String] {
        match self {
            DatasetSource::Synthetic { train_sequences, .. } | DatasetSource::Kitti { train_sequences, .. } => train_sequences,
        }
    }

    pub fn eval_sequences(&self) -> &[String] {
        match self {
            DatasetSource::Synthetic { eval_sequences, .. } | DatasetSource::Kitti { eval_sequences, .. } => eval_sequences,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_lengths() -> Vec<f64> {
    SEGMENT_LENGTHS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Segment lengths in metres for trajectory evaluation.
    #[serde(default = "default_lengths")]
    pub eval_lengths: Vec<f64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossParams,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_backend")]
    pub depth_backend: DepthBackend,
    #[serde(default)]
    pub augmentation: Augmentation,
}

fn default_backend() -> DepthBackend {
    DepthBackend::Fallback
}

impl RunConfig {
    /// Synthetic training on one generated sequence with default settings.
    pub fn synthetic(train_seed: u64) -> Self {
        Self {
            dataset: DatasetSource::Synthetic {
                scene: SyntheticConfig::default(),
                train_sequences: vec![train_seed.to_string()],
                eval_sequences: vec![train_seed.to_string()],
            },
            seed: 0,
            output_dir: default_output_dir(),
            eval_lengths: default_lengths(),
            model: ModelConfig::default(),
            loss: LossParams::default(),
            optimizer: OptimizerConfig::default(),
            depth_backend: DepthBackend::GroundTruth,
            augmentation: Augmentation::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, applies the environment override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Ok(root) = std::env::var(KITTI_ROOT_ENV) {
            cfg.override_kitti_root(PathBuf::from(root));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn override_kitti_root(&mut self, new_root: PathBuf) {
        if let DatasetSource::Kitti { root, .. } = &mut self.dataset {
            *root = new_root;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        if self.model.search_radius > MAX_SEARCH_RADIUS {
            return Err(Error::Config(format!(
                "search radius {} exceeds {MAX_SEARCH_RADIUS}",
                self.model.search_radius
            )));
        }
        if self.model.widths.iter().any(|w| *w < 4 || w % 4 != 0) {
            return Err(Error::Config(format!("channel widths must be positive multiples of 4, got {:?}", self.model.widths)));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.eval_lengths.is_empty() || self.eval_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("evaluation lengths must be positive, got {:?}", self.eval_lengths)));
        }
        if !(self.augmentation.brightness >= 0.0 && self.augmentation.brightness < 1.0) || !(self.augmentation.rotation_deg >= 0.0) {
            return Err(Error::Config("augmentation magnitudes must be non-negative (brightness < 1)".into()));
        }
        if self.dataset.train_sequences().is_empty() {
            return Err(Error::Config("no training sequences".into()));
        }
        match &self.dataset {
            DatasetSource::Synthetic { scene, train_sequences, eval_sequences } => {
                scene.validate()?;
                for id in train_sequences.iter().chain(eval_sequences) {
                    parse_synthetic_id(id)?;
                }
            }
            DatasetSource::Kitti { .. } => {
                if matches!(self.depth_backend, DepthBackend::GroundTruth) {
                    return Err(Error::Config("ground-truth depth is only available for synthetic data".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the model section; identifies parameter layouts in checkpoints.
    pub fn model_hash(&self) -> [u8; 32] {
        model_hash(&self.model)
    }
}

pub fn model_hash(model: &ModelConfig) -> [u8; 32] {
    let text = toml::to_string(model).expect("model config serializes");
    Sha256::digest(text.as_bytes()).into()
}

pub fn parse_synthetic_id(id: &str) -> Result<u64> {
    id.parse()
        .map_err(|_| Error::Config(format!("synthetic sequence ids are generator seeds, got {id:?}")))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::synthetic(7)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costvol::DEFAULT_SEARCH_RADIUS;

    #[test]
    fn round_trip_default() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_kitti_config() {
        let text = r#"
            seed = 3
            [dataset]
            kind = "kitti"
            root = "/data/kitti"
            train_sequences = ["00", "01"]
            eval_sequences = ["09", "10"]
        "#;
        let mut cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model.search_radius, DEFAULT_SEARCH_RADIUS);
        assert_eq!(cfg.depth_backend, DepthBackend::Fallback);
        assert_eq!(cfg.eval_lengths, SEGMENT_LENGTHS.to_vec());
        cfg.override_kitti_root("/elsewhere".into());
        assert!(matches!(&cfg.dataset, DatasetSource::Kitti { root, .. } if root == Path::new("/elsewhere")));
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.optimizer.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.search_radius = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.dataset = DatasetSource::Synthetic {
            scene: SyntheticConfig::default(),
            train_sequences: vec!["abc".into()],
            eval_sequences: vec![],
        };
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_toml_str("seed = 1\nunknown = 2\n").is_err());
    }

    #[test]
    fn model_hash_tracks_model_section() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.search_radius = 3;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
