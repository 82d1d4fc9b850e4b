//! Experiment configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::metrics::MetricConfig;
use crate::model::{BackbonesConfig, ModelConfig, Variant};
use crate::train::{BenchConfig, TrainConfig, TrainRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backbones: BackbonesConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            backbones: BackbonesConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// File (if any), then overrides; defaults fill the rest.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        if self.bench.n_passes == 0 {
            return Err(Error::InvalidConfig("bench.n_passes must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { variant: self.variant, backbones: self.backbones.clone(), fusion: self.fusion.clone(), decoder: self.decoder.clone() }
    }

    /// Hex SHA-256 of the canonical JSON encoding, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serialises")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn train_run(&self) -> TrainRun {
        let mut run = TrainRun::new(self.seed, self.data.image_side);
        run.metrics = self.metrics.clone();
        run.native_resolution_eval = self.data.native_resolution_eval;
        run.config_hash = self.hash();
        run
    }
}
