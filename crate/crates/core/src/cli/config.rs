use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::corpus::{LanguageRegistry, SegmentConfig};
use crate::error::{LidError, Result};
use crate::features::MfccConfig;
use crate::nn::{TdnnConfig, TrainConfig};
use crate::openset::DEFAULT_TAU;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySpec {
    pub in_set: Vec<String>,
    pub out_of_set: Vec<String>,
}

/// Everything that determines the pipeline's outputs. Serialized verbatim
/// into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_root: Option<PathBuf>,
    /// Languages; the 32/19 default list when absent.
    pub registry: Option<RegistrySpec>,
    pub segment: SegmentConfig,
    pub features: MfccConfig,
    /// Hidden-layer shape. The output width always follows the registry.
    pub tdnn: TdnnConfig,
    pub train: TrainConfig,
    pub backend: BackendConfig,
    pub tau: f64,
    pub seed: u64,
    /// Top-N list length in decision records and reports.
    pub top_n: usize,
    /// Threshold grid resolution for DET and sweep curves.
    pub grid_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset_root: None,
            registry: None,
            segment: SegmentConfig::default(),
            features: MfccConfig::default(),
            tdnn: TdnnConfig::default(),
            train: TrainConfig::default(),
            backend: BackendConfig::default(),
            tau: DEFAULT_TAU,
            seed: 0,
            top_n: 5,
            grid_points: crate::eval::DEFAULT_GRID_POINTS,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LidError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LidError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn registry(&self) -> Result<LanguageRegistry> {
        match &self.registry {
            Some(r) => LanguageRegistry::new(r.in_set.clone(), r.out_of_set.clone()),
            None => Ok(LanguageRegistry::builtin()),
        }
    }

    /// Copies the global seed into the component configs and checks ranges.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.backend.seed = self.seed;
        self.train.validate()?;
        self.backend.validate()?;
        self.features.validate(self.segment.rate)?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(LidError::Config(format!("tau {} is outside [0, 1]", self.tau)));
        }
        if self.top_n == 0 || self.grid_points < 2 {
            return Err(LidError::Config("top_n must be ≥ 1 and grid_points ≥ 2".into()));
        }
        if !(self.segment.segment_s > 0.0) {
            return Err(LidError::Config("segment_s must be positive".into()));
        }
        if let Some(root) = &self.dataset_root {
            if !root.is_dir() {
                return Err(LidError::Config(format!(
                    "dataset root {} is not a directory",
                    root.display()
                )));
            }
        }
        self.registry()?;
        Ok(self)
    }

    /// Network configuration sized for the registry's in-set languages.
    pub fn tdnn_for(&self, registry: &LanguageRegistry) -> TdnnConfig {
        let mut cfg = self.tdnn.clone();
        *cfg.layer_dims.last_mut().unwrap() = registry.in_set().len();
        cfg.bn_eps = self.train.bn_eps;
        cfg
    }

    /// Feature frames per segment.
    pub fn features_frames(&self) -> usize {
        self.features.num_frames(self.segment.samples_per_segment(), self.segment.rate)
    }

    pub fn dataset_root(&self) -> Result<&Path> {
        self.dataset_root.as_deref().ok_or_else(|| {
            LidError::Config(
                "no dataset root: set dataset_root, --dataset-root or LIDKIT_DATASET_ROOT".into(),
            )
        })
    }
}
