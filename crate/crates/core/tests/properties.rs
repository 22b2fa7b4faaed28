use proptest::prelude::*;

use dualconf::alignment::{mean_predicted, solve_delta, AlignmentConfig};
use dualconf::features::{clipped_log_odds, consistency, FeatureHyperParams, ReliabilityDescriptor, Standardizer};
use dualconf::fusion::{predict_prob, softplus, FusionParameters};
use dualconf::metrics::{auprc, auprc_n, aurc, auroc, reliability_bins, risk_coverage};
use dualconf::parsing::{parse_verbal_response, LabelAlphabet};
use dualconf::records::{normalize_token_scores, predicted_option, split_ids, SplitConfig};

fn logprob_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..5.0f64, 2..8)
}

fn scored_instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..20).prop_map(|v| v as f64 / 19.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(z in logprob_vec(), c in -50.0..50.0f64) {
        let p = normalize_token_scores("x", &z).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = normalize_token_scores("x", &shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn argmax_survives_increasing_maps(z in logprob_vec(), power in 0.2..5.0f64, scale in 0.1..10.0f64) {
        let p = normalize_token_scores("x", &z).unwrap();
        let k = predicted_option(&p).unwrap();
        let mapped: Vec<f64> = p.iter().map(|v| scale * v.powf(power) + 3.0).collect();
        // only maps that keep the order strict in floating point qualify
        let strict = {
            let mut pairs = true;
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if p[i] < p[j] && mapped[i] >= mapped[j] {
                        pairs = false;
                    }
                }
            }
            pairs
        };
        prop_assume!(strict);
        let max = mapped.iter().copied().fold(f64::MIN, f64::max);
        let first = mapped.iter().position(|&v| v == max).unwrap();
        prop_assert_eq!(first, k);
    }

    #[test]
    fn split_ignores_input_order(n in 3usize..200, seed in any::<u64>(), rot in 0usize..200) {
        let ids: Vec<String> = (0..n).map(|i| format!("r{i:04}")).collect();
        let config = SplitConfig { seed, ..SplitConfig::default() };
        let a = split_ids(ids.iter().map(String::as_str), &config).unwrap();
        let mut rotated = ids.clone();
        rotated.rotate_left(rot % n);
        rotated.reverse();
        let b = split_ids(rotated.iter().map(String::as_str), &config).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        for id in &ids {
            prop_assert_eq!(a.get(id), b.get(id));
        }
    }

    #[test]
    fn parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..300), k in 2usize..10, letters in any::<bool>()) {
        let text = String::from_utf8_lossy(&bytes);
        let alphabet = if letters { LabelAlphabet::Letters } else { LabelAlphabet::Numeric };
        let parsed = parse_verbal_response(&text, k, &alphabet).unwrap();
        prop_assert_eq!(parsed.values.len(), k);
        prop_assert_eq!(parsed.missing_mask.len(), k);
        for (v, m) in parsed.values.iter().zip(&parsed.missing_mask) {
            prop_assert!((0.0..=1.0).contains(v));
            prop_assert!(!m || *v == 0.5);
        }
    }

    #[test]
    fn parser_fragments_are_total(parts in prop::collection::vec(
        prop::sample::select(vec!["{", "}", "\"1\"", "\"3\"", ":", ",", " ", "55", "7.25", "-4", "B", "\\", "\"", "]"]), 0..60)) {
        let text: String = parts.concat();
        let parsed = parse_verbal_response(&text, 4, &LabelAlphabet::Letters).unwrap();
        prop_assert!(parsed.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn canonical_reparse_is_idempotent(entries in prop::collection::vec(prop::option::of(0u32..=1_000_000), 2..8)) {
        let k = entries.len();
        let body: Vec<String> = entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|v| format!("\"{}\": {}", i + 1, v as f64 / 10_000.0)))
            .collect();
        let first = parse_verbal_response(&format!("{{{}}}", body.join(", ")), k, &LabelAlphabet::Numeric).unwrap();
        let again = parse_verbal_response(&first.to_canonical_json(), k, &LabelAlphabet::Numeric).unwrap();
        prop_assert_eq!(&again.values, &first.values);
        prop_assert_eq!(&again.missing_mask, &first.missing_mask);
    }

    #[test]
    fn consistency_symmetric_and_decreasing(p in 0.0..=1.0f64, s in 0.0..=1.0f64, d in 0.001..0.5f64,
                                            gamma in 0.5..4.0f64, tau in 0.01..2.0f64) {
        let k = consistency(p, s, gamma, tau);
        prop_assert_eq!(k, consistency(s, p, gamma, tau));
        prop_assert!(k > 0.0 && k <= 1.0);
        let gap = (p - s).abs();
        let wider = consistency(0.0, gap + d, gamma, tau);
        let narrower = consistency(0.0, gap, gamma, tau);
        prop_assert!(wider <= narrower);
        if narrower > 1e-300 && gap + d <= 1.0 {
            prop_assert!(wider < narrower || wider == 0.0);
        }
    }

    #[test]
    fn log_odds_nondecreasing(a in -0.5..1.5f64, b in -0.5..1.5f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(clipped_log_odds(lo, 1e-6) <= clipped_log_odds(hi, 1e-6));
        if lo >= 1e-6 && hi <= 1.0 - 1e-6 && hi - lo > 1e-12 {
            prop_assert!(clipped_log_odds(lo, 1e-6) < clipped_log_odds(hi, 1e-6));
        }
    }

    #[test]
    fn descriptor_entries_move_with_their_cue(p_top in 0.3..0.95f64, s in 0.0..1.0f64, bump in 0.001..0.2f64) {
        let params = FeatureHyperParams::default();
        // verbal cue: raising s at k* never lowers phi[1]
        let token = [p_top, 1.0 - p_top];
        prop_assume!(p_top > 0.5);
        let base = ReliabilityDescriptor::from_channels(&token, &[s, 0.2], &params).unwrap();
        let up = ReliabilityDescriptor::from_channels(&token, &[(s + bump).min(1.0), 0.2], &params).unwrap();
        prop_assert!(up.phi[1] >= base.phi[1]);
        // token cue: raising the top probability raises phi[0], phi[3] and -H
        let higher = (p_top + bump).min(0.999);
        let sharper = ReliabilityDescriptor::from_channels(&[higher, 1.0 - higher], &[s, 0.2], &params).unwrap();
        prop_assert!(sharper.phi[0] >= base.phi[0]);
        prop_assert!(sharper.phi[3] >= base.phi[3]);
        prop_assert!(sharper.phi[4] >= base.phi[4]);
    }

    #[test]
    fn standardizer_moments(rows in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 3), 2..80)) {
        let std = Standardizer::fit(&rows).unwrap();
        prop_assert!(std.scales().iter().all(|&s| s > 0.0));
        let z: Vec<Vec<f64>> = rows.iter().map(|r| std.apply(r)).collect();
        let n = z.len() as f64;
        for j in 0..3 {
            if std.dropped[j] {
                continue;
            }
            let mean = z.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn effective_weights_positive(w in prop::collection::vec(-30.0..30.0f64, 5)) {
        let params = FusionParameters { b: 0.0, w_raw: w };
        prop_assert!(params.effective_weights().iter().all(|&v| v > 0.0));
        prop_assert!(softplus(0.0) > 0.69 && softplus(0.0) < 0.7);
    }

    #[test]
    fn head_is_monotone(b in -5.0..5.0f64, w in prop::collection::vec(-6.0..6.0f64, 5),
                        phi in prop::collection::vec(-4.0..4.0f64, 5), j in 0usize..5, step in 0.0..10.0f64) {
        let params = FusionParameters { b, w_raw: w };
        let mut up = phi.clone();
        up[j] += step;
        prop_assert!(predict_prob(&up, &params) >= predict_prob(&phi, &params));
    }

    #[test]
    fn g_strictly_increasing(logits in prop::collection::vec(-8.0..8.0f64, 1..50), d1 in -10.0..10.0f64, gap in 1e-3..5.0f64) {
        prop_assert!(mean_predicted(d1 + gap, &logits).unwrap() > mean_predicted(d1, &logits).unwrap());
    }

    #[test]
    fn converged_solutions_agree(logits in prop::collection::vec(-6.0..6.0f64, 1..80), target in 0.05..0.95f64) {
        let cfg = AlignmentConfig::default();
        let a = solve_delta(&logits, target, &cfg).unwrap();
        let wide = AlignmentConfig { bracket: 37.0, ..cfg.clone() };
        let b = solve_delta(&logits, target, &wide).unwrap();
        let ga = mean_predicted(a.delta, &logits).unwrap();
        let gb = mean_predicted(b.delta, &logits).unwrap();
        prop_assert!((ga - gb).abs() <= 2.0 * cfg.tolerance);
        prop_assert!(a.iterations <= cfg.iteration_bound() + a.rebrackets as usize);
    }

    #[test]
    fn ranking_metrics_ignore_increasing_maps((scores, correct) in scored_instance(), power in 0.3..3.0f64) {
        let mapped: Vec<f64> = scores.iter().map(|s| 0.1 + 0.8 * s.powf(power)).collect();
        prop_assert_eq!(auroc(&scores, &correct).unwrap(), auroc(&mapped, &correct).unwrap());
        prop_assert_eq!(auprc(&scores, &correct).unwrap(), auprc(&mapped, &correct).unwrap());
        prop_assert_eq!(auprc_n(&scores, &correct).unwrap(), auprc_n(&mapped, &correct).unwrap());
        prop_assert_eq!(
            aurc(&risk_coverage(&scores, &correct).unwrap()),
            aurc(&risk_coverage(&mapped, &correct).unwrap())
        );
    }

    #[test]
    fn bins_partition_records((scores, correct) in scored_instance(), n_bins in 1usize..25) {
        let bins = reliability_bins(&scores, &correct, n_bins).unwrap();
        prop_assert_eq!(bins.len(), n_bins);
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), scores.len());
        let mut with_ends = scores.clone();
        with_ends.extend([0.0, 1.0]);
        let mut labels = correct.clone();
        labels.extend([true, false]);
        let bins = reliability_bins(&with_ends, &labels, n_bins).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), with_ends.len());
    }

    #[test]
    fn aurc_close_to_plain_average((scores, correct) in scored_instance()) {
        let points = risk_coverage(&scores, &correct).unwrap();
        let n = points.len() as f64;
        let average = points.iter().map(|p| p.risk).sum::<f64>() / n;
        prop_assert!((aurc(&points) - average).abs() <= 1.0 / (2.0 * n) + 1e-12);
    }
}

#[test]
fn ece_changes_under_an_increasing_map() {
    let scores = [0.9, 0.8, 0.7, 0.6, 0.3];
    let correct = [true, true, false, true, false];
    let mapped: Vec<f64> = scores.iter().map(|s: &f64| s * s).collect();
    let before = dualconf::metrics::ece(&scores, &correct, 10).unwrap();
    let after = dualconf::metrics::ece(&mapped, &correct, 10).unwrap();
    assert_ne!(before, after);
    assert_eq!(auroc(&scores, &correct).unwrap(), auroc(&mapped, &correct).unwrap());
}
