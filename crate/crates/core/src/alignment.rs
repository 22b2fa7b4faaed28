//! Order-preserving mean alignment.
//!
//! Finds the single bias shift `delta` for which the mean of
//! `sigmoid(logit_i + delta)` equals a target accuracy. The mean is
//! continuous and strictly increasing in `delta`, so bisection on a
//! bracket that straddles the target converges to the unique root.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{sigmoid, FusionParameters};

/// How many times the bracket may be doubled when `[-M, M]` does not
/// straddle the target.
pub const MAX_REBRACKETS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Half-width `M` of the initial bracket `[-M, M]`.
    pub bracket: f64,
    /// Absolute tolerance on the mean-probability residual.
    pub tolerance: f64,
    /// Target accuracy is clipped into `[epsilon, 1 - epsilon]`.
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            bracket: 20.0,
            tolerance: 1e-8,
            epsilon: 1e-6,
            max_iters: 200,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bracket > 0.0 && self.bracket.is_finite()) {
            return Err(Error::Config(format!("bracket must be positive, got {}", self.bracket)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// `ceil(log2(2M / eta))`: enough halvings to shrink the bracket below
    /// the tolerance.
    pub fn iteration_bound(&self) -> usize {
        (2.0 * self.bracket / self.tolerance).log2().ceil() as usize
    }
}

/// Mean of `sigmoid(logit + delta)`.
pub fn mean_predicted(delta: f64, logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Usage("mean alignment needs at least one logit".into()));
    }
    Ok(logits.iter().map(|&t| sigmoid(t + delta)).sum::<f64>() / logits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSolution {
    pub delta: f64,
    /// Requested target before clipping.
    pub target: f64,
    pub clipped_target: f64,
    /// `|g(delta) - clipped_target|`.
    pub residual: f64,
    pub iterations: usize,
    /// Number of bracket doublings that were needed.
    pub rebrackets: u32,
}

/// Solves `mean_predicted(delta, logits) = clip(target)` by bisection.
///
/// Stops once both the residual and the distance from `delta` to the root
/// are within `tolerance`, which takes at most
/// [`AlignmentConfig::iteration_bound`] steps plus one per rebracket.
pub fn solve_delta(logits: &[f64], target: f64, config: &AlignmentConfig) -> Result<AlignmentSolution> {
    config.validate()?;
    if logits.is_empty() {
        return Err(Error::Usage("mean alignment needs at least one logit".into()));
    }
    if logits.iter().any(|t| !t.is_finite()) {
        return Err(Error::Usage("logits must be finite".into()));
    }
    if !target.is_finite() {
        return Err(Error::Usage(format!("target accuracy must be finite, got {target}")));
    }
    let clipped = target.clamp(config.epsilon, 1.0 - config.epsilon);
    if clipped != target {
        log::warn!("target accuracy {target} clipped to {clipped}; the shift will be large");
    }
    let g = |delta: f64| mean_predicted(delta, logits);

    let mut half_width = config.bracket;
    let mut rebrackets = 0;
    let (mut lo, mut hi) = loop {
        let (lo, hi) = (-half_width, half_width);
        if g(lo)? <= clipped && clipped <= g(hi)? {
            break (lo, hi);
        }
        if rebrackets == MAX_REBRACKETS {
            return Err(Error::Convergence {
                iterations: 0,
                residual: (g(0.0)? - clipped).abs(),
            });
        }
        rebrackets += 1;
        half_width *= 2.0;
        log::warn!("bracket does not straddle the target; widening to +/-{half_width}");
    };

    let mut best = (0.0, f64::INFINITY);
    for iter in 1..=config.max_iters {
        let mid = 0.5 * (lo + hi);
        let value = g(mid)?;
        let residual = (value - clipped).abs();
        if residual < best.1 {
            best = (mid, residual);
        }
        // The root lies in [lo, hi], so the half-width bounds the error in
        // delta; requiring it too keeps delta itself within tolerance.
        if residual <= config.tolerance && 0.5 * (hi - lo) <= config.tolerance {
            return Ok(AlignmentSolution {
                delta: mid,
                target,
                clipped_target: clipped,
                residual,
                iterations: iter,
                rebrackets,
            });
        }
        if value < clipped {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence {
        iterations: config.max_iters,
        residual: best.1,
    })
}

/// Shifts the bias by `delta`; weights are untouched.
pub fn apply_shift(params: &FusionParameters, delta: f64) -> FusionParameters {
    params.shifted(delta)
}
