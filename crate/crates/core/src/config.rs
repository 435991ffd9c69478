//! TOML run configuration. Every section is optional and unknown keys are
//! rejected; the defaults describe the 16×16, 16-QAM reference setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mimo::{ComplexSystem, DatasetConfig, SnrConvention};
use crate::training::{KernelSettings, NetConfig, QuantSettings, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub nt: usize,
    pub nr: usize,
    pub constellation: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub samples: usize,
    pub snr_convention: SnrConvention,
    /// Dataset generation seed.
    pub seed: u64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            nt: 16,
            nr: 16,
            constellation: vec![-3.0, -1.0, 1.0, 3.0],
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            samples: 50_000,
            snr_convention: SnrConvention::ReceivedTotal,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub seed: u64,
    pub calibration_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_halving_period: t.lr_halving_period,
            seed: t.seed,
            calibration_samples: t.calibration_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: SystemSection,
    pub net: NetConfig,
    pub quant: QuantSettings,
    pub kernel: KernelSettings,
    pub train: TrainSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config()?.validate()?;
        self.train_config().validate()
    }

    pub fn system(&self) -> Result<ComplexSystem> {
        let mut sys = ComplexSystem::new(self.system.nt, self.system.nr, self.system.constellation.clone())?;
        sys.snr_convention = self.system.snr_convention;
        Ok(sys)
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        Ok(DatasetConfig {
            system: self.system()?,
            snr_db: self.system.snr_db.clone(),
            count: self.system.samples,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            net: self.net.clone(),
            quant: self.quant.clone(),
            kernel: self.kernel.clone(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            lr_halving_period: self.train.lr_halving_period,
            seed: self.train.seed,
            calibration_samples: self.train.calibration_samples,
        }
    }
}
