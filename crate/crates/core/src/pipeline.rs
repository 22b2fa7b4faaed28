//! End-to-end fitting and evaluation.
//!
//! Fitting runs, for every bandwidth in the grid: descriptors, a
//! standardizer fitted on the calibration split, the fusion head with early
//! stopping on validation NLL, and the bias shift solved on the validation
//! split (or on pooled out-of-fold predictions when cross-fitting). The
//! bandwidth with the lowest held-out NLL of the shifted head wins. Test
//! records never reach any fitting stage; [`LeakageGuard`] enforces this.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{solve_delta, AlignmentConfig, AlignmentSolution};
use crate::artifact::{
    AlignmentMode, AlignmentRecord, CalibratorArtifact, Provenance, SplitCounts, TauScore, ARTIFACT_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::features::{build_descriptor, FeatureHyperParams, FeatureSet, ReliabilityDescriptor, Standardizer};
use crate::fusion::{binary_nll, fit_head, head_logit, FitConfig, HeadFit, LabeledRows};
use crate::metrics::{evaluate_scores, MetricReport, DEFAULT_BINS};
use crate::records::{split_dataset, ConfidenceRecord, SplitAssignment, SplitConfig, SplitTag};

pub const DEFAULT_TAU_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub split: SplitConfig,
    /// Log-odds clip threshold.
    pub epsilon: f64,
    pub gamma: f64,
    pub tau_grid: Vec<f64>,
    pub feature_set: FeatureSet,
    pub fit: FitConfig,
    pub alignment: AlignmentConfig,
    pub alignment_mode: AlignmentMode,
    pub fitted_at: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split: SplitConfig::default(),
            epsilon: 1e-6,
            gamma: 2.0,
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            feature_set: FeatureSet::Full,
            fit: FitConfig::default(),
            alignment: AlignmentConfig::default(),
            alignment_mode: AlignmentMode::Validation,
            fitted_at: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.fit.validate()?;
        self.alignment.validate()?;
        if self.tau_grid.is_empty() {
            return Err(Error::Config("tau grid is empty".into()));
        }
        for &tau in &self.tau_grid {
            self.features(tau).validate()?;
        }
        if self.alignment_mode == AlignmentMode::CrossFit && self.split.folds.is_none() {
            return Err(Error::Config("cross-fit alignment requires a fold count".into()));
        }
        Ok(())
    }

    fn features(&self, tau: f64) -> FeatureHyperParams {
        FeatureHyperParams {
            epsilon: self.epsilon,
            gamma: self.gamma,
            tau,
        }
    }
}

/// Refuses test-split ids at every fitting stage and records which ids
/// each stage saw.
#[derive(Debug, Default)]
pub struct LeakageGuard {
    test_ids: BTreeSet<String>,
    admitted: RefCell<BTreeMap<&'static str, BTreeSet<String>>>,
}

impl LeakageGuard {
    pub fn new(test_ids: impl IntoIterator<Item = String>) -> Self {
        LeakageGuard {
            test_ids: test_ids.into_iter().collect(),
            admitted: RefCell::default(),
        }
    }

    pub fn from_assignment(assignment: &SplitAssignment) -> Self {
        Self::new(assignment.ids_in(SplitTag::Test).into_iter().map(str::to_string))
    }

    pub fn admit<'a>(&self, stage: &'static str, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut admitted = self.admitted.borrow_mut();
        let seen = admitted.entry(stage).or_default();
        for id in ids {
            if self.test_ids.contains(id) {
                return Err(Error::Leakage {
                    id: id.to_string(),
                    stage,
                });
            }
            seen.insert(id.to_string());
        }
        Ok(())
    }

    /// Ids seen so far, per stage.
    pub fn admitted(&self) -> BTreeMap<&'static str, BTreeSet<String>> {
        self.admitted.borrow().clone()
    }
}

struct Row<'a> {
    id: &'a str,
    descriptor: ReliabilityDescriptor,
    correct: bool,
}

fn describe<'a>(records: &[&'a ConfidenceRecord], params: &FeatureHyperParams) -> Result<Vec<Row<'a>>> {
    records
        .iter()
        .map(|r| {
            Ok(Row {
                id: r.id(),
                descriptor: build_descriptor(r, params)?,
                correct: r.correct(),
            })
        })
        .collect()
}

fn labeled(rows: &[&Row], standardizer: &Standardizer, feature_set: FeatureSet) -> Result<LabeledRows> {
    LabeledRows::new(
        rows.iter()
            .map(|r| standardizer.apply(&feature_set.select(&r.descriptor.phi)))
            .collect(),
        rows.iter().map(|r| r.correct).collect(),
    )
}

fn fit_standardizer_on(rows: &[&Row], feature_set: FeatureSet, guard: &LeakageGuard) -> Result<Standardizer> {
    guard.admit("fit_standardizer", rows.iter().map(|r| r.id))?;
    let selected: Vec<Vec<f64>> = rows.iter().map(|r| feature_set.select(&r.descriptor.phi)).collect();
    Standardizer::fit(&selected)
}

fn mean_nll(logits: &[f64], labels: &[bool], delta: f64) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&t, &y)| binary_nll(t + delta, y))
        .sum::<f64>()
        / logits.len() as f64
}

fn accuracy_of(rows: &[&Row]) -> f64 {
    rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64
}

struct Candidate {
    tau: f64,
    standardizer: Standardizer,
    head: HeadFit,
    solution: AlignmentSolution,
    alignment_n: usize,
    alignment_accuracy: f64,
    score: f64,
}

fn require_nonempty(rows: &[&Row], what: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Fit {
            stage: "split",
            message: format!("{what} split is empty"),
        });
    }
    Ok(())
}

fn fit_validation_candidate(
    cal: &[&Row],
    val: &[&Row],
    tau: f64,
    config: &PipelineConfig,
    guard: &LeakageGuard,
) -> Result<Candidate> {
    require_nonempty(cal, "calibration")?;
    require_nonempty(val, "validation")?;
    let standardizer = fit_standardizer_on(cal, config.feature_set, guard)?;
    let train = labeled(cal, &standardizer, config.feature_set)?;
    let held = labeled(val, &standardizer, config.feature_set)?;

    guard.admit("fit_head", cal.iter().chain(val).map(|r| r.id))?;
    let head = fit_head(&train, Some(&held), &config.fit)?;

    guard.admit("solve_delta", val.iter().map(|r| r.id))?;
    let logits: Vec<f64> = held.features.iter().map(|x| head_logit(x, &head.params)).collect();
    let accuracy = accuracy_of(val);
    let solution = solve_delta(&logits, accuracy, &config.alignment)?;
    let score = mean_nll(&logits, &held.labels, solution.delta);
    Ok(Candidate {
        tau,
        standardizer,
        head,
        solution,
        alignment_n: val.len(),
        alignment_accuracy: accuracy,
        score,
    })
}

fn fit_cross_fit_candidate(
    pool: &[(&Row, usize)],
    folds: usize,
    tau: f64,
    config: &PipelineConfig,
    guard: &LeakageGuard,
) -> Result<Candidate> {
    let mut oos_logits = Vec::with_capacity(pool.len());
    let mut oos_labels = Vec::with_capacity(pool.len());
    let mut best_iterations = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train: Vec<&Row> = pool.iter().filter(|(_, f)| *f != fold).map(|(r, _)| *r).collect();
        let held: Vec<&Row> = pool.iter().filter(|(_, f)| *f == fold).map(|(r, _)| *r).collect();
        require_nonempty(&train, "fold-complement")?;
        require_nonempty(&held, "held-out fold")?;
        let standardizer = fit_standardizer_on(&train, config.feature_set, guard)?;
        let train_rows = labeled(&train, &standardizer, config.feature_set)?;
        let held_rows = labeled(&held, &standardizer, config.feature_set)?;
        guard.admit("fit_head", train.iter().chain(&held).map(|r| r.id))?;
        let head = fit_head(&train_rows, Some(&held_rows), &config.fit)?;
        best_iterations.push(head.best_iteration);
        oos_logits.extend(held_rows.features.iter().map(|x| head_logit(x, &head.params)));
        oos_labels.extend(held_rows.labels);
    }

    let all: Vec<&Row> = pool.iter().map(|(r, _)| *r).collect();
    guard.admit("solve_delta", all.iter().map(|r| r.id))?;
    let accuracy = accuracy_of(&all);
    let solution = solve_delta(&oos_logits, accuracy, &config.alignment)?;
    let score = mean_nll(&oos_logits, &oos_labels, solution.delta);

    // final head on the whole pool, run for the average early-stopping point
    let standardizer = fit_standardizer_on(&all, config.feature_set, guard)?;
    let rows = labeled(&all, &standardizer, config.feature_set)?;
    let iters = (best_iterations.iter().sum::<usize>() as f64 / folds as f64).round() as usize;
    let final_config = FitConfig {
        max_iters: iters.max(1),
        ..config.fit.clone()
    };
    guard.admit("fit_head", all.iter().map(|r| r.id))?;
    let head = fit_head(&rows, None, &final_config)?;
    Ok(Candidate {
        tau,
        standardizer,
        head,
        solution,
        alignment_n: all.len(),
        alignment_accuracy: accuracy,
        score,
    })
}

/// Result of [`fit_pipeline`].
#[derive(Debug)]
pub struct PipelineFit {
    pub artifact: CalibratorArtifact,
    pub assignment: SplitAssignment,
    /// Ids seen by each fitting stage.
    pub admitted: BTreeMap<&'static str, BTreeSet<String>>,
}

pub fn fit_pipeline(records: &[ConfidenceRecord], config: &PipelineConfig) -> Result<PipelineFit> {
    config.validate()?;
    let assignment = split_dataset(records, &config.split)?;
    let guard = LeakageGuard::from_assignment(&assignment);
    let artifact = fit_with_assignment(records, &assignment, config, &guard)?;
    Ok(PipelineFit {
        artifact,
        assignment,
        admitted: guard.admitted(),
    })
}

/// Fits against an explicit split; every fitting stage goes through `guard`.
pub fn fit_with_assignment(
    records: &[ConfidenceRecord],
    assignment: &SplitAssignment,
    config: &PipelineConfig,
    guard: &LeakageGuard,
) -> Result<CalibratorArtifact> {
    config.validate()?;
    let mut by_split: BTreeMap<SplitTag, Vec<&ConfidenceRecord>> = BTreeMap::new();
    let mut folds_of: BTreeMap<&str, usize> = BTreeMap::new();
    // id order makes every downstream sum independent of input order
    let mut ordered: Vec<&ConfidenceRecord> = records.iter().collect();
    ordered.sort_by(|a, b| a.id().cmp(b.id()));
    for record in ordered {
        let a = assignment.get(record.id()).ok_or_else(|| Error::Fit {
            stage: "split",
            message: format!("record `{}` has no split assignment", record.id()),
        })?;
        by_split.entry(a.split).or_default().push(record);
        if let Some(f) = a.fold {
            folds_of.insert(record.id(), f);
        }
    }
    let cal_records = by_split.remove(&SplitTag::Calibration).unwrap_or_default();
    let val_records = by_split.remove(&SplitTag::Validation).unwrap_or_default();
    let n_test = by_split.remove(&SplitTag::Test).map_or(0, |v| v.len());

    let mut best: Option<Candidate> = None;
    let mut tau_scores = Vec::with_capacity(config.tau_grid.len());
    for &tau in &config.tau_grid {
        let params = config.features(tau);
        let cal = describe(&cal_records, &params)?;
        let val = describe(&val_records, &params)?;
        let candidate = match config.alignment_mode {
            AlignmentMode::Validation => {
                let cal: Vec<&Row> = cal.iter().collect();
                let val: Vec<&Row> = val.iter().collect();
                fit_validation_candidate(&cal, &val, tau, config, guard)?
            }
            AlignmentMode::CrossFit => {
                let folds = config.split.folds.unwrap_or_default();
                let mut pool = Vec::with_capacity(cal.len() + val.len());
                for row in cal.iter().chain(&val) {
                    let fold = folds_of.get(row.id).copied().ok_or_else(|| Error::Fit {
                        stage: "split",
                        message: format!("record `{}` has no fold", row.id),
                    })?;
                    pool.push((row, fold));
                }
                fit_cross_fit_candidate(&pool, folds, tau, config, guard)?
            }
        };
        log::debug!("tau {tau}: held-out NLL {:.6}", candidate.score);
        tau_scores.push(TauScore {
            tau,
            validation_nll: candidate.score,
        });
        if best.as_ref().is_none_or(|b| candidate.score < b.score) {
            best = Some(candidate);
        }
    }
    let best = best.ok_or_else(|| Error::Config("tau grid is empty".into()))?;

    let artifact = CalibratorArtifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        features: config.features(best.tau),
        feature_set: config.feature_set,
        standardizer: best.standardizer,
        head: best.head.params,
        delta: best.solution.delta,
        alignment: AlignmentRecord {
            mode: config.alignment_mode,
            n: best.alignment_n,
            accuracy: best.alignment_accuracy,
            clipped_target: best.solution.clipped_target,
            residual: best.solution.residual,
            iterations: best.solution.iterations,
            rebrackets: best.solution.rebrackets,
        },
        provenance: Provenance {
            split: config.split.clone(),
            split_digest: assignment.digest(),
            counts: SplitCounts {
                calibration: cal_records.len(),
                validation: val_records.len(),
                test: n_test,
            },
            tau_scores,
            fit: config.fit.clone(),
            alignment: config.alignment.clone(),
            head_best_iteration: best.head.best_iteration,
            head_iterations_run: best.head.iterations_run,
            fitted_at: config.fitted_at.clone(),
        },
    };
    artifact.validate()?;
    Ok(artifact)
}

/// Confidence source to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Token probability of the predicted option.
    Token,
    /// Stated confidence for the predicted option.
    Verbal,
    /// Output of the fitted calibrator.
    Calibrated,
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Channel::Token),
            "verbal" => Ok(Channel::Verbal),
            "calibrated" => Ok(Channel::Calibrated),
            other => Err(Error::Usage(format!(
                "unknown channel `{other}` (expected token, verbal or calibrated)"
            ))),
        }
    }
}

/// Per-record confidence for a channel, a ranking key, and correctness.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelScores {
    pub confidences: Vec<f64>,
    /// Equal to `confidences` except for the calibrated channel, where it
    /// is the unshifted head logit.
    pub ranking: Vec<f64>,
    pub correct: Vec<bool>,
}

pub fn channel_scores<'a>(
    records: impl IntoIterator<Item = &'a ConfidenceRecord>,
    artifact: Option<&CalibratorArtifact>,
    channel: Channel,
) -> Result<ChannelScores> {
    let mut out = ChannelScores::default();
    for record in records {
        let k_star = record.predicted_index();
        let (confidence, rank) = match channel {
            Channel::Token => {
                let p = record.token_probs()[k_star];
                (p, p)
            }
            Channel::Verbal => {
                let s = record.verbal()[k_star];
                (s, s)
            }
            Channel::Calibrated => {
                let artifact = artifact
                    .ok_or_else(|| Error::Usage("the calibrated channel needs a calibrator artifact".into()))?;
                let score = artifact.score_record(record)?;
                (score.probability, score.logit)
            }
        };
        out.confidences.push(confidence);
        out.ranking.push(rank);
        out.correct.push(record.correct());
    }
    Ok(out)
}

pub fn evaluate<'a>(
    records: impl IntoIterator<Item = &'a ConfidenceRecord>,
    artifact: Option<&CalibratorArtifact>,
    channel: Channel,
    n_bins: usize,
) -> Result<MetricReport> {
    let scores = channel_scores(records, artifact, channel)?;
    evaluate_scores(&scores.confidences, &scores.ranking, &scores.correct, n_bins)
}

/// Group key used for records that lack the requested meta key.
pub const MISSING_GROUP: &str = "<none>";

/// One report per distinct value of `meta[key]`.
pub fn evaluate_grouped<'a>(
    records: impl IntoIterator<Item = &'a ConfidenceRecord>,
    artifact: Option<&CalibratorArtifact>,
    channel: Channel,
    n_bins: usize,
    key: &str,
) -> Result<BTreeMap<String, MetricReport>> {
    let mut groups: BTreeMap<String, Vec<&ConfidenceRecord>> = BTreeMap::new();
    for record in records {
        let group = record
            .meta()
            .get(key)
            .cloned()
            .unwrap_or_else(|| MISSING_GROUP.to_string());
        groups.entry(group).or_default().push(record);
    }
    groups
        .into_iter()
        .map(|(group, members)| Ok((group, evaluate(members, artifact, channel, n_bins)?)))
        .collect()
}

pub fn evaluate_default_bins<'a>(
    records: impl IntoIterator<Item = &'a ConfidenceRecord>,
    artifact: Option<&CalibratorArtifact>,
    channel: Channel,
) -> Result<MetricReport> {
    evaluate(records, artifact, channel, DEFAULT_BINS)
}

/// Records of one split, re-derived from the split settings stored in the
/// artifact. Fails if the records are not the set the artifact was fitted
/// on.
pub fn select_split<'a>(
    records: &'a [ConfidenceRecord],
    artifact: &CalibratorArtifact,
    split: SplitTag,
) -> Result<Vec<&'a ConfidenceRecord>> {
    let assignment = split_dataset(records, &artifact.provenance.split)?;
    if assignment.digest() != artifact.provenance.split_digest {
        return Err(Error::Config(
            "records do not match the set the calibrator was fitted on (split digest differs)".into(),
        ));
    }
    Ok(records
        .iter()
        .filter(|r| assignment.get(r.id()).is_some_and(|a| a.split == split))
        .collect())
}
