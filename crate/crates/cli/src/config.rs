//! Key-value configuration file. Every key is optional; missing keys keep
//! the library defaults and command-line flags override the file.

use std::path::Path;

use serde::Deserialize;

use dualconf::artifact::AlignmentMode;
use dualconf::features::FeatureSet;
use dualconf::{CollectionConfig, Error, PipelineConfig, Result, SyntheticConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub alignment: AlignmentSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    pub collect: Option<CollectionConfig>,
    pub synth: Option<SyntheticConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub calibration: Option<f64>,
    pub validation: Option<f64>,
    pub seed: Option<u64>,
    pub folds: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<Vec<f64>>,
    pub feature_set: Option<FeatureSet>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub learning_rate: Option<f64>,
    pub max_iters: Option<usize>,
    pub weight_decay: Option<f64>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSection {
    pub mode: Option<AlignmentMode>,
    pub bracket: Option<f64>,
    pub eta: Option<f64>,
    pub acc_epsilon: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub bins: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::io(path, source))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the file on top of the library defaults.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut c = PipelineConfig::default();
        set(&mut c.split.calibration, self.split.calibration);
        set(&mut c.split.validation, self.split.validation);
        set(&mut c.split.seed, self.split.seed);
        if self.split.folds.is_some() {
            c.split.folds = self.split.folds;
        }
        set(&mut c.epsilon, self.features.epsilon);
        set(&mut c.gamma, self.features.gamma);
        set(&mut c.tau_grid, self.features.tau.clone());
        set(&mut c.feature_set, self.features.feature_set);
        set(&mut c.fit.learning_rate, self.fit.learning_rate);
        set(&mut c.fit.max_iters, self.fit.max_iters);
        set(&mut c.fit.weight_decay, self.fit.weight_decay);
        set(&mut c.fit.patience, self.fit.patience);
        set(&mut c.fit.seed, self.fit.seed);
        set(&mut c.alignment_mode, self.alignment.mode);
        set(&mut c.alignment.bracket, self.alignment.bracket);
        set(&mut c.alignment.tolerance, self.alignment.eta);
        set(&mut c.alignment.epsilon, self.alignment.acc_epsilon);
        set(&mut c.alignment.max_iters, self.alignment.max_iters);
        c
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
