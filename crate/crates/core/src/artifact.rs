//! Serialized end-to-end calibrator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::error::{Error, Result};
use crate::features::{build_descriptor, FeatureHyperParams, FeatureSet, ReliabilityDescriptor, Standardizer};
use crate::fusion::{head_logit, sigmoid, FitConfig, FusionParameters};
use crate::records::{ConfidenceRecord, SplitConfig};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Shift solved on the validation split.
    #[default]
    Validation,
    /// Shift solved on out-of-fold predictions pooled over all folds.
    CrossFit,
}

/// Where the bias shift came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub mode: AlignmentMode,
    /// Rows the shift was solved on.
    pub n: usize,
    /// Empirical accuracy of those rows before clipping.
    pub accuracy: f64,
    pub clipped_target: f64,
    pub residual: f64,
    pub iterations: usize,
    pub rebrackets: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub calibration: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauScore {
    pub tau: f64,
    /// NLL of the shifted head on the held-out rows used for selection.
    pub validation_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub split: SplitConfig,
    /// SHA-256 over the sorted id/split table.
    pub split_digest: String,
    pub counts: SplitCounts,
    pub tau_scores: Vec<TauScore>,
    pub fit: FitConfig,
    pub alignment: AlignmentConfig,
    pub head_best_iteration: usize,
    pub head_iterations_run: usize,
    /// Free-form timestamp supplied by the caller; omitted by default so
    /// repeated fits stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_at: Option<String>,
}

/// Everything needed to score new records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorArtifact {
    pub format_version: u32,
    pub features: FeatureHyperParams,
    pub feature_set: FeatureSet,
    pub standardizer: Standardizer,
    /// Head before the alignment shift.
    pub head: FusionParameters,
    pub delta: f64,
    pub alignment: AlignmentRecord,
    pub provenance: Provenance,
}

/// Calibrated probability together with the unshifted head logit, which
/// orders records exactly like the probability does and is unaffected by
/// the alignment shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedScore {
    pub probability: f64,
    pub logit: f64,
}

impl CalibratorArtifact {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: ARTIFACT_FORMAT_VERSION,
            });
        }
        self.features.validate()?;
        self.standardizer.validate()?;
        self.head.validate()?;
        let dim = self.feature_set.dim();
        if self.standardizer.dim() != dim || self.head.dim() != dim {
            return Err(Error::Config(format!(
                "feature set expects {dim} columns, standardizer has {}, head has {}",
                self.standardizer.dim(),
                self.head.dim()
            )));
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite".into()));
        }
        Ok(())
    }

    /// Head with the alignment shift applied.
    pub fn shifted_head(&self) -> FusionParameters {
        self.head.shifted(self.delta)
    }

    pub fn standardized(&self, descriptor: &ReliabilityDescriptor) -> Vec<f64> {
        self.standardizer.apply(&self.feature_set.select(&descriptor.phi))
    }

    pub fn score_descriptor(&self, descriptor: &ReliabilityDescriptor) -> CalibratedScore {
        let logit = head_logit(&self.standardized(descriptor), &self.head);
        CalibratedScore {
            probability: sigmoid(logit + self.delta),
            logit,
        }
    }

    pub fn score_record(&self, record: &ConfidenceRecord) -> Result<CalibratedScore> {
        Ok(self.score_descriptor(&build_descriptor(record, &self.features)?))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "serializing calibrator".into(),
            source,
        })
    }

    /// Parses and validates; unknown format versions are rejected before
    /// the rest of the document is interpreted.
    pub fn from_json(text: &str) -> Result<Self> {
        let json = |source| Error::Json {
            context: "calibrator artifact".into(),
            source,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(json)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Config("artifact lacks a numeric format_version".into()))?;
        if found != ARTIFACT_FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: found.try_into().unwrap_or(u32::MAX),
                expected: ARTIFACT_FORMAT_VERSION,
            });
        }
        let artifact: CalibratorArtifact = serde_json::from_value(value).map_err(json)?;
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
