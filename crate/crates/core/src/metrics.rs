//! Calibration and failure-prediction metrics over `(confidence, correct)`
//! pairs.
//!
//! Ranking metrics (AUROC, AUPRC, AURC) depend on scores only through
//! their order, so any strictly increasing transform of the scores leaves
//! them bit-identical. ECE does not have this property.
//!
//! Tie conventions: AUROC gives half credit to tied pairs; AUPRC and the
//! risk-coverage curve order tied scores by their input index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

/// Recorded in every report so consumers know how AURC was integrated.
pub const AURC_CONVENTION: &str = "trapezoid over k/n points plus left rectangle [0, 1/n] at r(1/n)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub empirical_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub coverage: f64,
    pub risk: f64,
}

/// All metrics for one set of scored predictions. Ranking metrics that are
/// undefined for single-class inputs are `None` (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub acc: f64,
    pub ece: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub auprc_n: Option<f64>,
    pub aurc: f64,
    pub mean_confidence: f64,
    pub n_bins: usize,
    pub aurc_convention: String,
    pub bins: Vec<ReliabilityBin>,
    pub rc_points: Vec<RiskCoveragePoint>,
}

fn check_pair(scores: &[f64], correct: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Usage("metrics need at least one prediction".into()));
    }
    if scores.len() != correct.len() {
        return Err(Error::Usage(format!(
            "{} scores but {} correctness labels",
            scores.len(),
            correct.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Usage("scores must not be NaN".into()));
    }
    Ok(())
}

fn check_confidences(confidences: &[f64]) -> Result<()> {
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Usage("confidences must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Indices sorted by descending score; equal scores keep input order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

pub fn accuracy(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Usage("accuracy of an empty set".into()));
    }
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Equal-width bins over `[0, 1]`; the last bin is closed on the right.
pub fn reliability_bins(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_pair(confidences, correct)?;
    check_confidences(confidences)?;
    if n_bins == 0 {
        return Err(Error::Usage("n_bins must be at least 1".into()));
    }
    let mut sums = vec![(0usize, 0.0f64, 0usize); n_bins];
    for (&c, &y) in confidences.iter().zip(correct) {
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += 1;
        sums[b].1 += c;
        sums[b].2 += y as usize;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (count, conf, hits))| ReliabilityBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count,
            mean_confidence: (count > 0).then(|| conf / count as f64),
            empirical_accuracy: (count > 0).then(|| hits as f64 / count as f64),
        })
        .collect())
}

fn ece_from_bins(bins: &[ReliabilityBin], n: usize) -> f64 {
    bins.iter()
        .filter_map(|b| {
            let gap = (b.mean_confidence? - b.empirical_accuracy?).abs();
            Some(b.count as f64 / n as f64 * gap)
        })
        .sum()
}

/// Expected calibration error with `n_bins` equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    let bins = reliability_bins(confidences, correct, n_bins)?;
    Ok(ece_from_bins(&bins, confidences.len()))
}

/// Mann-Whitney AUROC: `(concordant + 0.5 * tied) / (P * N)`, via
/// mid-ranks. `None` when only one class is present.
pub fn auroc(scores: &[f64], correct: &[bool]) -> Result<Option<f64>> {
    check_pair(scores, correct)?;
    let positives = correct.iter().filter(|&&c| c).count();
    let negatives = correct.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps mid-ranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end; twice the mid-rank is start + end + 1
        let twice_mid = (start + end + 1) as u128;
        let group_pos = order[start..end].iter().filter(|&&i| correct[i]).count() as u128;
        twice_rank_sum += twice_mid * group_pos;
        start = end;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(Some(twice_u as f64 / (2.0 * positives as f64 * negatives as f64)))
}

/// Average precision: mean over positives of precision at their rank.
/// `None` without positives.
pub fn auprc(scores: &[f64], correct: &[bool]) -> Result<Option<f64>> {
    check_pair(scores, correct)?;
    let positives = correct.iter().filter(|&&c| c).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if correct[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(total / positives as f64))
}

/// Average precision rescaled against the prevalence baseline,
/// `(AP - prevalence) / (1 - prevalence)`. Negative when scores anti-rank
/// correctness; `None` when either class is absent.
pub fn auprc_n(scores: &[f64], correct: &[bool]) -> Result<Option<f64>> {
    let ap = auprc(scores, correct)?;
    let prevalence = accuracy(correct)?;
    Ok(ap
        .filter(|_| prevalence < 1.0)
        .map(|ap| (ap - prevalence) / (1.0 - prevalence)))
}

/// Risk of the top-`k` most confident predictions for `k = 1..n`.
pub fn risk_coverage(scores: &[f64], correct: &[bool]) -> Result<Vec<RiskCoveragePoint>> {
    check_pair(scores, correct)?;
    let n = scores.len() as f64;
    let mut hits = 0usize;
    Ok(descending_order(scores)
        .into_iter()
        .enumerate()
        .map(|(pos, i)| {
            hits += correct[i] as usize;
            let k = pos + 1;
            RiskCoveragePoint {
                coverage: k as f64 / n,
                risk: 1.0 - hits as f64 / k as f64,
            }
        })
        .collect())
}

/// Area under the risk-coverage curve; see [`AURC_CONVENTION`].
pub fn aurc(points: &[RiskCoveragePoint]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let mut area = first.coverage * first.risk;
    for w in points.windows(2) {
        area += (w[1].coverage - w[0].coverage) * (w[0].risk + w[1].risk) / 2.0;
    }
    area
}

/// Full report. `confidences` drive the calibration metrics, `ranking`
/// the ranking metrics; pass the same slice for both unless a
/// shift-invariant ranking key is available.
pub fn evaluate_scores(confidences: &[f64], ranking: &[f64], correct: &[bool], n_bins: usize) -> Result<MetricReport> {
    check_pair(confidences, correct)?;
    check_pair(ranking, correct)?;
    let bins = reliability_bins(confidences, correct, n_bins)?;
    let rc_points = risk_coverage(ranking, correct)?;
    let n = correct.len();
    Ok(MetricReport {
        n,
        acc: accuracy(correct)?,
        ece: ece_from_bins(&bins, n),
        auroc: auroc(ranking, correct)?,
        auprc: auprc(ranking, correct)?,
        auprc_n: auprc_n(ranking, correct)?,
        aurc: aurc(&rc_points),
        mean_confidence: confidences.iter().sum::<f64>() / n as f64,
        n_bins,
        aurc_convention: AURC_CONVENTION.to_string(),
        bins,
        rc_points,
    })
}
