//! Reliability features: the cross-channel consistency kernel, the three
//! scalar signals at the predicted option, and the five-feature descriptor
//! `[logit(token), logit(verbal), logit(consistency), margin, -entropy]`.
//!
//! Every feature is oriented so that larger means more reliable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{predicted_option, ConfidenceRecord};

pub const DESCRIPTOR_DIM: usize = 5;

/// Columns whose calibration-split standard deviation falls below this are
/// left unscaled.
pub const MIN_FEATURE_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureHyperParams {
    /// Clip threshold of the log-odds transform.
    pub epsilon: f64,
    /// Kernel shape exponent.
    pub gamma: f64,
    /// Kernel bandwidth.
    pub tau: f64,
}

impl Default for FeatureHyperParams {
    fn default() -> Self {
        FeatureHyperParams {
            epsilon: 1e-6,
            gamma: 2.0,
            tau: 0.2,
        }
    }
}

impl FeatureHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Log-odds of `z` after clipping into `[epsilon, 1 - epsilon]`.
pub fn clipped_log_odds(z: f64, epsilon: f64) -> f64 {
    // Work with the distance to the nearer endpoint so the upper clip is
    // exactly the negated lower clip; 1 - z is exact for z in [0.5, 1].
    // NaN is treated as the lower clip.
    let (tail, sign) = if z.is_nan() || z <= 0.5 {
        (z, -1.0)
    } else {
        (1.0 - z, 1.0)
    };
    let tail = if tail.is_nan() {
        epsilon
    } else {
        tail.clamp(epsilon, 0.5)
    };
    sign * ((-tail).ln_1p() - tail.ln())
}

/// RBF agreement `exp(-|p - s|^gamma / tau)`, in `(0, 1]`.
pub fn consistency(p: f64, s: f64, gamma: f64, tau: f64) -> f64 {
    (-(p - s).abs().powf(gamma) / tau).exp()
}

/// Difference between the two largest probabilities.
pub fn top2_margin(p: &[f64]) -> f64 {
    let (first, second) = p.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
        if x > a {
            (x, a)
        } else if x > b {
            (a, x)
        } else {
            (a, b)
        }
    });
    if second.is_finite() {
        first - second
    } else {
        0.0
    }
}

/// Natural-log Shannon entropy with `0 log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Signals and features of one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDescriptor {
    pub predicted_index: usize,
    pub r_token: f64,
    pub r_verbal: f64,
    pub r_cons: f64,
    pub margin: f64,
    pub entropy: f64,
    pub phi: [f64; DESCRIPTOR_DIM],
}

impl ReliabilityDescriptor {
    pub fn from_channels(token_probs: &[f64], verbal: &[f64], params: &FeatureHyperParams) -> Result<Self> {
        if token_probs.len() != verbal.len() {
            return Err(Error::invalid_record(
                "<unnamed>",
                format!("channel lengths differ ({} vs {})", token_probs.len(), verbal.len()),
            ));
        }
        let k_star = predicted_option(token_probs)?;
        let r_token = token_probs[k_star];
        let r_verbal = verbal[k_star];
        let r_cons = consistency(r_token, r_verbal, params.gamma, params.tau);
        let margin = top2_margin(token_probs);
        let entropy = shannon_entropy(token_probs);
        let eps = params.epsilon;
        let phi = [
            clipped_log_odds(r_token, eps),
            clipped_log_odds(r_verbal, eps),
            clipped_log_odds(r_cons, eps),
            margin,
            -entropy,
        ];
        Ok(ReliabilityDescriptor {
            predicted_index: k_star,
            r_token,
            r_verbal,
            r_cons,
            margin,
            entropy,
            phi,
        })
    }
}

pub fn build_descriptor(record: &ConfidenceRecord, params: &FeatureHyperParams) -> Result<ReliabilityDescriptor> {
    ReliabilityDescriptor::from_channels(record.token_probs(), record.verbal(), params).map_err(|e| match e {
        Error::InvalidRecord { reason, .. } => Error::invalid_record(record.id(), reason),
        other => other,
    })
}

/// Which descriptor columns feed the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// All five features.
    #[default]
    Full,
    /// Token log-odds only; the head is then a one-dimensional logistic
    /// calibrator.
    TokenOnly,
}

impl FeatureSet {
    pub fn dim(self) -> usize {
        match self {
            FeatureSet::Full => DESCRIPTOR_DIM,
            FeatureSet::TokenOnly => 1,
        }
    }

    pub fn select(self, phi: &[f64; DESCRIPTOR_DIM]) -> Vec<f64> {
        match self {
            FeatureSet::Full => phi.to_vec(),
            FeatureSet::TokenOnly => vec![phi[0]],
        }
    }
}

/// Per-column affine standardization with positive scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub dropped: Vec<bool>,
}

impl Standardizer {
    /// Population mean and standard deviation per column. Near-constant
    /// columns get `(mu, sigma) = (0, 1)` and pass through unchanged.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Fit {
                stage: "standardizer",
                message: format!("need at least 2 calibration rows, got {n}"),
            });
        }
        let dim = rows[0].as_ref().len();
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::Fit {
                stage: "standardizer",
                message: "rows have inconsistent dimension".into(),
            });
        }
        let mut mu = vec![0.0; dim];
        let mut sigma = vec![1.0; dim];
        let mut dropped = vec![false; dim];
        for j in 0..dim {
            let mean = rows.iter().map(|r| r.as_ref()[j]).sum::<f64>() / n as f64;
            let var = rows.iter().map(|r| (r.as_ref()[j] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd < MIN_FEATURE_STD {
                dropped[j] = true;
                log::info!("feature column {j} has near-zero variance on the calibration split; left unscaled");
            } else {
                mu[j] = mean;
                sigma[j] = sd;
            }
        }
        Ok(Standardizer { mu, sigma, dropped })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Per-column slope of the affine map, `1 / sigma`.
    pub fn scales(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| 1.0 / s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.mu.len();
        if self.sigma.len() != dim || self.dropped.len() != dim {
            return Err(Error::Config("standardizer vectors have inconsistent lengths".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(
                "standardizer requires finite mu and positive sigma".into(),
            ));
        }
        Ok(())
    }
}

pub fn fit_standardizer(descriptors: &[ReliabilityDescriptor]) -> Result<Standardizer> {
    let rows: Vec<[f64; DESCRIPTOR_DIM]> = descriptors.iter().map(|d| d.phi).collect();
    Standardizer::fit(&rows)
}

pub fn apply_standardizer(descriptor: &ReliabilityDescriptor, standardizer: &Standardizer) -> Vec<f64> {
    standardizer.apply(&descriptor.phi)
}
