use std::collections::BTreeSet;

use dualconf::alignment::mean_predicted;
use dualconf::artifact::{AlignmentMode, CalibratorArtifact};
use dualconf::features::{FeatureHyperParams, FeatureSet, ReliabilityDescriptor};
use dualconf::fusion::{head_logit, sigmoid};
use dualconf::metrics::DEFAULT_BINS;
use dualconf::pipeline::{
    channel_scores, evaluate, evaluate_grouped, fit_pipeline, fit_with_assignment, select_split, Channel, LeakageGuard,
    PipelineConfig,
};
use dualconf::records::{split_dataset, ConfidenceRecord, SplitConfig, SplitTag};
use dualconf::synth::{generate_synthetic, SyntheticConfig};
use dualconf::Error;

fn records(n: usize, seed: u64) -> Vec<ConfidenceRecord> {
    generate_synthetic(&SyntheticConfig::overconfident(n, seed)).unwrap()
}

fn quick_config() -> PipelineConfig {
    PipelineConfig {
        tau_grid: vec![0.1, 0.5],
        ..PipelineConfig::default()
    }
}

#[test]
fn test_ids_never_reach_fitting_stages() {
    let data = records(600, 1);
    let fit = fit_pipeline(&data, &quick_config()).unwrap();
    let test: BTreeSet<String> = fit
        .assignment
        .ids_in(SplitTag::Test)
        .into_iter()
        .map(str::to_string)
        .collect();
    assert!(!test.is_empty());
    for stage in ["fit_standardizer", "fit_head", "solve_delta"] {
        let seen = &fit.admitted[stage];
        assert!(!seen.is_empty(), "{stage} saw no ids");
        assert!(seen.is_disjoint(&test), "{stage} saw a test id");
    }
    // the shift is solved on validation rows only
    let val: BTreeSet<String> = fit
        .assignment
        .ids_in(SplitTag::Validation)
        .into_iter()
        .map(str::to_string)
        .collect();
    assert_eq!(fit.admitted["solve_delta"], val);
}

#[test]
fn guard_trips_on_planted_test_id() {
    let data = records(300, 2);
    let config = quick_config();
    let assignment = split_dataset(&data, &config.split).unwrap();
    let planted = assignment
        .ids_in(SplitTag::Calibration)
        .into_iter()
        .next()
        .unwrap()
        .to_string();
    let guard = LeakageGuard::new([planted.clone()]);
    let err = fit_with_assignment(&data, &assignment, &config, &guard).unwrap_err();
    match err {
        Error::Leakage { id, stage } => {
            assert_eq!(id, planted);
            assert_eq!(stage, "fit_standardizer");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn cross_fit_guard_covers_every_stage() {
    let data = records(500, 3);
    let config = PipelineConfig {
        split: SplitConfig {
            folds: Some(4),
            ..SplitConfig::default()
        },
        alignment_mode: AlignmentMode::CrossFit,
        ..quick_config()
    };
    let fit = fit_pipeline(&data, &config).unwrap();
    let test: BTreeSet<&str> = fit.assignment.ids_in(SplitTag::Test);
    for (stage, seen) in &fit.admitted {
        assert!(seen.iter().all(|id| !test.contains(id.as_str())), "{stage}");
    }
    assert_eq!(fit.artifact.alignment.mode, AlignmentMode::CrossFit);
    assert_eq!(
        fit.artifact.alignment.n,
        fit.artifact.provenance.counts.calibration + fit.artifact.provenance.counts.validation
    );
}

#[test]
fn cross_fit_requires_folds() {
    let config = PipelineConfig {
        alignment_mode: AlignmentMode::CrossFit,
        ..PipelineConfig::default()
    };
    assert!(matches!(fit_pipeline(&records(50, 4), &config), Err(Error::Config(_))));
}

#[test]
fn alignment_split_mean_matches_accuracy() {
    let data = records(1500, 5);
    let fit = fit_pipeline(&data, &quick_config()).unwrap();
    let val = select_split(&data, &fit.artifact, SplitTag::Validation).unwrap();
    let report = evaluate(
        val.iter().copied(),
        Some(&fit.artifact),
        Channel::Calibrated,
        DEFAULT_BINS,
    )
    .unwrap();
    assert!((report.mean_confidence - fit.artifact.alignment.accuracy).abs() <= 1e-8);
    // recompute g directly from unshifted logits
    let logits: Vec<f64> = val
        .iter()
        .map(|r| fit.artifact.score_record(r).unwrap().logit)
        .collect();
    let g = mean_predicted(fit.artifact.delta, &logits).unwrap();
    assert!((g - report.acc).abs() <= 1e-8);
}

#[test]
fn ranking_metrics_identical_before_and_after_shift() {
    let data = records(1200, 6);
    let fit = fit_pipeline(&data, &quick_config()).unwrap();
    let test = select_split(&data, &fit.artifact, SplitTag::Test).unwrap();
    let shifted = evaluate(test.iter().copied(), Some(&fit.artifact), Channel::Calibrated, 10).unwrap();
    let mut unshifted_artifact = fit.artifact.clone();
    unshifted_artifact.delta = 0.0;
    let unshifted = evaluate(test.iter().copied(), Some(&unshifted_artifact), Channel::Calibrated, 10).unwrap();
    assert_eq!(shifted.auroc, unshifted.auroc);
    assert_eq!(shifted.auprc, unshifted.auprc);
    assert_eq!(shifted.aurc.to_bits(), unshifted.aurc.to_bits());
    assert_ne!(shifted.mean_confidence, unshifted.mean_confidence);
}

#[test]
fn reloaded_artifact_scores_bit_identically() {
    let data = records(800, 7);
    let fit = fit_pipeline(&data, &quick_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calibrator.json");
    fit.artifact.save(&path).unwrap();
    let reloaded = CalibratorArtifact::load(&path).unwrap();
    assert_eq!(reloaded, fit.artifact);
    let val = select_split(&data, &fit.artifact, SplitTag::Validation).unwrap();
    let a = channel_scores(val.iter().copied(), Some(&fit.artifact), Channel::Calibrated).unwrap();
    let b = channel_scores(val.iter().copied(), Some(&reloaded), Channel::Calibrated).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.confidences), bits(&b.confidences));
}

#[test]
fn unknown_artifact_version_rejected() {
    let fit = fit_pipeline(&records(300, 8), &quick_config()).unwrap();
    let text = fit
        .artifact
        .to_json()
        .unwrap()
        .replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(matches!(
        CalibratorArtifact::from_json(&text),
        Err(Error::Version { found: 2, expected: 1 })
    ));
}

#[test]
fn repeated_fits_are_byte_identical() {
    let data = records(700, 9);
    let a = fit_pipeline(&data, &quick_config())
        .unwrap()
        .artifact
        .to_json()
        .unwrap();
    let mut shuffled = data.clone();
    shuffled.reverse();
    let b = fit_pipeline(&shuffled, &quick_config())
        .unwrap()
        .artifact
        .to_json()
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn token_only_mode_is_logistic_on_token_log_odds() {
    let data = generate_synthetic(&SyntheticConfig {
        n: 1500,
        token_shift: 1.0,
        token_noise: 0.3,
        seed: 10,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let config = PipelineConfig {
        feature_set: FeatureSet::TokenOnly,
        tau_grid: vec![0.2],
        ..PipelineConfig::default()
    };
    let fit = fit_pipeline(&data, &config).unwrap();
    assert_eq!(fit.artifact.head.dim(), 1);
    // the calibrated score depends on the record only through r_token
    let params = FeatureHyperParams::default();
    let a = ReliabilityDescriptor::from_channels(&[0.7, 0.2, 0.1], &[0.9, 0.0, 0.1], &params).unwrap();
    let b = ReliabilityDescriptor::from_channels(&[0.7, 0.15, 0.15], &[0.1, 0.5, 0.5], &params).unwrap();
    let sa = fit.artifact.score_descriptor(&a);
    let sb = fit.artifact.score_descriptor(&b);
    assert_eq!(sa.logit, sb.logit);
    let head = fit.artifact.shifted_head();
    let std = fit.artifact.standardized(&a);
    assert_eq!(sigmoid(head_logit(&std, &head)), sa.probability);
}

#[test]
fn improving_every_cue_never_lowers_confidence() {
    let data = records(900, 11);
    let fit = fit_pipeline(&data, &quick_config()).unwrap();
    let params = fit.artifact.features;
    let cases = [
        ([0.5, 0.3, 0.2], [0.4, 0.3, 0.3], [0.7, 0.2, 0.1], [0.6, 0.2, 0.2]),
        ([0.4, 0.35, 0.25], [0.2, 0.5, 0.3], [0.8, 0.1, 0.1], [0.8, 0.1, 0.1]),
    ];
    for (p, s, p2, s2) in cases {
        let lo = ReliabilityDescriptor::from_channels(&p, &s, &params).unwrap();
        let hi = ReliabilityDescriptor::from_channels(&p2, &s2, &params).unwrap();
        assert!(
            hi.phi.iter().zip(&lo.phi).all(|(h, l)| h >= l),
            "{:?} vs {:?}",
            hi.phi,
            lo.phi
        );
        assert!(fit.artifact.score_descriptor(&hi).probability >= fit.artifact.score_descriptor(&lo).probability);
    }
}

#[test]
fn grouping_by_meta_key() {
    let data = records(400, 12);
    let groups = evaluate_grouped(&data, None, Channel::Token, 10, "difficulty").unwrap();
    let total: usize = groups.values().map(|r| r.n).sum();
    assert_eq!(total, data.len());
    assert!(groups.keys().all(|k| k == "easy" || k == "hard"));
    let missing = evaluate_grouped(&data, None, Channel::Token, 10, "no_such_key").unwrap();
    assert_eq!(missing.keys().collect::<Vec<_>>(), vec!["<none>"]);
}

#[test]
fn token_and_verbal_channels_disagree() {
    let data = records(2000, 13);
    let token = evaluate(&data, None, Channel::Token, 10).unwrap();
    let verbal = evaluate(&data, None, Channel::Verbal, 10).unwrap();
    assert!((token.ece - verbal.ece).abs() > 0.01);
}

#[test]
fn foreign_records_rejected_by_split_digest() {
    let fit = fit_pipeline(&records(300, 14), &quick_config()).unwrap();
    let other = records(300, 15);
    assert!(matches!(
        select_split(&other[..299], &fit.artifact, SplitTag::Test),
        Err(Error::Config(_))
    ));
}
