//! TOML experiment configuration.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/mnist-s1"
//!
//! [dataset]
//! name = "mnist"          # or "cifar10"
//! root = "/data"          # optional, else $FFCNN_DATA_ROOT
//! per_class = 1000        # optional training subset per class
//! test_per_class = 200    # optional test subset per class
//!
//! [roster]
//! presets = ["scheme1"]   # single, scheme1, ed1 … ed4, scheme3, all
//! k1 = 30                 # optional overrides of the dataset constants
//! k2 = 20
//! lambda = 0.75
//! fc = [120, 84, 10]
//!
//! [[roster.bases]]        # explicit bases, appended after the presets
//! name = "FF-1"
//! tag = "S1"
//! form = "GRAY"
//! sizes = [5, 5]
//! kernels = [6, 16]
//! fc = [120, 84, 10]
//! seed = 0
//! view = { kind = "CONV2", k2 = 20 }
//!
//! [ensemble]
//! energy = 0.995
//! t1 = 0.98               # defaults depend on the dataset
//! t2 = 0.7
//! hard_stage = true
//! svm = { c = 1.0, tol = 1e-3 }
//! ```

use std::path::{Path, PathBuf};

use ffcnn::data::DatasetName;
use ffcnn::ensemble::EnsembleOptions;
use ffcnn::fc::FcArch;
use ffcnn::ffcnn::{preset_roster_with, BaseConfig, DatasetDefaults, RosterPreset};
use ffcnn::svm::SvmParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DATA_ROOT_ENV: &str = "FFCNN_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds subset sampling and every preset base.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub roster: RosterConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterConfig {
    #[serde(default)]
    pub presets: Vec<RosterPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fc: Option<FcArch>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bases: Vec<BaseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_energy")]
    pub energy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<f64>,
    #[serde(default)]
    pub hard_stage: bool,
    #[serde(default = "default_hard_offset")]
    pub hard_seed_offset: u64,
    #[serde(default)]
    pub svm: SvmParams,
}

fn default_energy() -> f64 {
    0.995
}

fn default_hard_offset() -> u64 {
    1
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            energy: default_energy(),
            t1: None,
            t2: None,
            hard_stage: false,
            hard_seed_offset: default_hard_offset(),
            svm: SvmParams::default(),
        }
    }
}

/// Confidence thresholds `(T1, T2)` used for each dataset.
pub fn default_thresholds(dataset: DatasetName) -> (f64, f64) {
    match dataset {
        DatasetName::Mnist => (0.98, 0.7),
        DatasetName::Cifar10 => (0.97, 0.65),
    }
}

impl ExperimentConfig {
    /// A config running one preset with every default.
    pub fn preset(dataset: DatasetName, preset: RosterPreset) -> Self {
        Self {
            seed: 0,
            output_dir: None,
            dataset: DatasetConfig { name: dataset, root: None, per_class: None, test_per_class: None },
            roster: RosterConfig { presets: vec![preset], ..RosterConfig::default() },
            ensemble: EnsembleConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn defaults(&self) -> DatasetDefaults {
        let mut d = DatasetDefaults::for_dataset(self.dataset.name);
        let r = &self.roster;
        if let Some(k1) = r.k1 {
            d.k1 = k1;
        }
        if let Some(k2) = r.k2 {
            d.k2 = k2;
        }
        if let Some(lambda) = r.lambda {
            d.lambda = lambda;
        }
        if let Some(fc) = &r.fc {
            d.fc = fc.clone();
        }
        d
    }

    /// Preset bases in declared order followed by the explicit ones.
    pub fn roster(&self) -> Vec<BaseConfig> {
        let d = self.defaults();
        let mut out: Vec<BaseConfig> =
            self.roster.presets.iter().flat_map(|&p| preset_roster_with(self.dataset.name, p, &d, self.seed)).collect();
        out.extend(self.roster.bases.iter().cloned());
        out
    }

    pub fn ensemble_options(&self) -> EnsembleOptions {
        let (t1, t2) = default_thresholds(self.dataset.name);
        let e = &self.ensemble;
        EnsembleOptions {
            energy: e.energy,
            svm: e.svm,
            t1: e.t1.unwrap_or(t1),
            t2: e.t2.unwrap_or(t2),
            hard_stage: e.hard_stage,
            hard_seed_offset: e.hard_seed_offset,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let roster = self.roster();
        if roster.is_empty() {
            return Err(CliError::Config("roster is empty: set roster.presets or roster.bases".into()));
        }
        for base in &roster {
            base.validate().map_err(|e| CliError::Config(format!("base {}: {e}", base.name)))?;
            if base.fc.class_count() != 10 {
                return Err(CliError::Config(format!(
                    "base {} ends in {} outputs but {:?} has 10 classes",
                    base.name,
                    base.fc.class_count(),
                    self.dataset.name
                )));
            }
        }
        for (key, v) in [("dataset.per_class", self.dataset.per_class), ("dataset.test_per_class", self.dataset.test_per_class)] {
            if v == Some(0) {
                return Err(CliError::Config(format!("{key} must be positive")));
            }
        }
        self.ensemble_options().validate().map_err(|e| CliError::Config(format!("ensemble: {e}")))
    }

    /// Dataset root from the config, else from the environment.
    pub fn data_root(&self) -> CliResult<PathBuf> {
        if let Some(root) = &self.dataset.root {
            return Ok(root.clone());
        }
        std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Data(format!("no dataset.root in config and {DATA_ROOT_ENV} is unset")))
    }
}
