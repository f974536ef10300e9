//! Run configuration: structure, training and pipeline settings in one TOML file.
//!
//! ```toml
//! version = 1
//!
//! [structure]
//! k_sum = 2
//! k_prod_x = 2
//! k_prod_y = 2
//! leaf_threshold = 500
//!
//! [train]
//! learning_rate = 0.05
//! max_epochs = 200
//!
//! [pipeline]
//! n_outputs = 2
//! test_fraction = 0.3
//! ```
//!
//! Every field is optional and falls back to its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circuit::StructureConfig;
use crate::error::{Error, Result};
use crate::inference::NlpdMode;
use crate::training::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// The last `n_outputs` CSV columns are targets.
    pub n_outputs: usize,
    /// `None` detects a header row.
    pub has_header: Option<bool>,
    pub standardize: bool,
    /// Project standardised covariates onto this many principal components.
    pub pca_dims: Option<usize>,
    /// Hold out this fraction of the training file and evaluate on it.
    pub test_fraction: Option<f64>,
    pub split_seed: u64,
    pub nlpd_mode: NlpdMode,
    /// Report errors and densities in the original target units.
    pub unstandardized_metrics: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_outputs: 1,
            has_header: None,
            standardize: true,
            pca_dims: None,
            test_fraction: None,
            split_seed: 0,
            nlpd_mode: NlpdMode::MomentMatched,
            unstandardized_metrics: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub structure: StructureConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            structure: StructureConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Uses one seed for structure construction, initialisation and splitting.
    pub fn set_seed(&mut self, seed: u64) {
        self.structure.rng_seed = seed;
        self.train.rng_seed = seed;
        self.pipeline.split_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Format(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.structure.validate()?;
        self.train.validate()?;
        let p = &self.pipeline;
        if p.n_outputs == 0 {
            return Err(Error::InvalidArgument("n_outputs must be at least 1".into()));
        }
        if p.pca_dims == Some(0) {
            return Err(Error::InvalidArgument("pca_dims must be at least 1".into()));
        }
        if let Some(f) = p.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!("test_fraction must lie in (0, 1), got {f}")));
            }
        }
        Ok(())
    }
}
