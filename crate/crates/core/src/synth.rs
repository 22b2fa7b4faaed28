//! Seeded synthetic records with controlled miscalibration.
//!
//! Each record draws a latent probability `pi` that the top-1 answer is
//! correct. Correctness is sampled from `pi`; the token channel reports
//! `sigmoid(scale * logit(pi) + shift + noise)` as the top-1 probability and
//! the verbal channel does the same with its own parameters. With zero
//! noise and offsets the token channel is calibrated by construction. The
//! latent `pi` is stored in `meta["latent_p"]`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::sigmoid;
use crate::parsing::LabelAlphabet;
use crate::records::{ConfidenceRecord, RecordLine};

/// Latent probabilities start this far above the uniform level `1/k`, so
/// the predicted option is always a strict maximum.
const LATENT_FLOOR_GAP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub k: usize,
    /// Beta shape parameters of the latent-accuracy distribution, rescaled
    /// onto `(1/k + 0.01, 1)`.
    pub difficulty_alpha: f64,
    pub difficulty_beta: f64,
    /// Standard deviation of logit-scale noise per channel.
    pub token_noise: f64,
    pub verbal_noise: f64,
    pub token_shift: f64,
    pub token_scale: f64,
    pub verbal_shift: f64,
    pub verbal_scale: f64,
    /// Round verbal confidences to whole percentages.
    pub verbal_integer_percent: bool,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 1000,
            k: 4,
            difficulty_alpha: 2.0,
            difficulty_beta: 1.5,
            token_noise: 0.0,
            verbal_noise: 0.0,
            token_shift: 0.0,
            token_scale: 1.0,
            verbal_shift: 0.0,
            verbal_scale: 1.0,
            verbal_integer_percent: true,
            seed: 0,
            id_prefix: "syn-".into(),
        }
    }
}

impl SyntheticConfig {
    /// Token channel calibrated, verbal channel noisy but unbiased.
    pub fn calibrated(n: usize, seed: u64) -> Self {
        SyntheticConfig {
            n,
            seed,
            verbal_noise: 1.0,
            ..SyntheticConfig::default()
        }
    }

    /// Token logits shifted by +2 and the verbal channel by +1, both noisy.
    pub fn overconfident(n: usize, seed: u64) -> Self {
        SyntheticConfig {
            n,
            seed,
            token_shift: 2.0,
            token_noise: 0.5,
            verbal_shift: 1.0,
            verbal_noise: 1.0,
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let non_negative = |x: f64| x >= 0.0 && x.is_finite();
        if !positive(self.difficulty_alpha) || !positive(self.difficulty_beta) {
            return Err(Error::Config("difficulty shape parameters must be positive".into()));
        }
        if ![self.token_noise, self.verbal_noise, self.token_scale, self.verbal_scale]
            .into_iter()
            .all(non_negative)
        {
            return Err(Error::Config("noise and scale parameters must be non-negative".into()));
        }
        if !self.token_shift.is_finite() || !self.verbal_shift.is_finite() {
            return Err(Error::Config("shifts must be finite".into()));
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Splits `1 - top` over `k - 1` options so that every share stays below `top`.
fn spread_remainder(rng: &mut ChaCha8Rng, top: f64, k: usize) -> Vec<f64> {
    let others = k - 1;
    let uniform = 1.0 / others as f64;
    let draws: Vec<f64> = (0..others).map(|_| rng.sample::<f64, _>(Exp1) + 1e-9).collect();
    let total: f64 = draws.iter().sum();
    let dirichlet: Vec<f64> = draws.iter().map(|d| d / total).collect();
    let d_max = dirichlet.iter().copied().fold(0.0, f64::max);
    let rest = 1.0 - top;
    let lambda = if d_max > uniform {
        (0.9 * (top / rest - uniform) / (d_max - uniform)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    dirichlet
        .into_iter()
        .map(|d| rest * ((1.0 - lambda) * uniform + lambda * d))
        .collect()
}

/// Deterministic for a given config.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<ConfidenceRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let beta = Beta::new(config.difficulty_alpha, config.difficulty_beta)
        .map_err(|e| Error::Config(format!("difficulty distribution: {e}")))?;
    let k = config.k;
    let floor = 1.0 / k as f64 + LATENT_FLOOR_GAP;
    let channel_floor = 1.0 / k as f64 + 1e-3;
    let ceiling = 1.0 - 1e-9;

    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let u: f64 = beta.sample(&mut rng);
        let latent = (floor + (1.0 - floor) * u).clamp(floor, 0.995);
        let correct = rng.gen_bool(latent);
        let predicted = rng.gen_range(0..k);
        let gold = if correct {
            predicted
        } else {
            (predicted + rng.gen_range(1..k)) % k
        };

        let token_noise: f64 = rng.sample(StandardNormal);
        let top = sigmoid(config.token_scale * logit(latent) + config.token_shift + config.token_noise * token_noise)
            .clamp(channel_floor, ceiling);
        let rest = spread_remainder(&mut rng, top, k);
        let mut probs = Vec::with_capacity(k);
        let mut rest_iter = rest.into_iter();
        for j in 0..k {
            probs.push(if j == predicted {
                top
            } else {
                rest_iter.next().unwrap_or(0.0)
            });
        }

        let verbal_noise: f64 = rng.sample(StandardNormal);
        let mut stated =
            sigmoid(config.verbal_scale * logit(latent) + config.verbal_shift + config.verbal_noise * verbal_noise);
        let mut verbal: Vec<f64> = (0..k)
            .map(|j| {
                if j == predicted {
                    stated
                } else {
                    (1.0 - stated) * rng.gen::<f64>()
                }
            })
            .collect();
        if config.verbal_integer_percent {
            for v in &mut verbal {
                *v = (*v * 100.0).round() / 100.0;
            }
            stated = verbal[predicted];
        }
        debug_assert!((0.0..=1.0).contains(&stated));

        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), "synthetic".to_string());
        meta.insert("latent_p".to_string(), latent.to_string());
        meta.insert(
            "difficulty".to_string(),
            if latent >= 0.7 { "easy" } else { "hard" }.to_string(),
        );
        let line = RecordLine {
            id: format!("{}{i:06}", config.id_prefix),
            k,
            option_logprobs: Some(probs.iter().map(|p| Some(p.ln())).collect()),
            token_probs: None,
            verbal: Some(verbal),
            verbal_raw: None,
            verbal_missing_mask: Some(vec![false; k]),
            gold_index: gold,
            meta,
            flags: Vec::new(),
        };
        let record = ConfidenceRecord::from_line(line, &LabelAlphabet::Numeric)?;
        debug_assert_eq!(record.predicted_index(), predicted);
        records.push(record);
    }
    Ok(records)
}
