//! Record model for one multiple-choice instance, the token-channel
//! normalization, deterministic splitting and JSONL persistence.
//!
//! Option indices are 0-based everywhere in this crate. The 1-based option
//! keys used in model responses are translated in [`crate::parsing`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsing::{parse_verbal_response, LabelAlphabet, VerbalSource};

/// Tolerance for simplex membership and logprob/prob agreement.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Gap below the smallest returned log-prob assigned to labels the
/// provider did not return.
pub const MISSING_LOGPROB_GAP: f64 = 10.0;

pub const FLAG_MISSING_TOKEN_LOGPROB: &str = "missing_token_logprob";

/// Softmax of option log-probabilities with max subtraction.
pub fn normalize_token_scores(id: &str, logprobs: &[f64]) -> Result<Vec<f64>> {
    if logprobs.len() < 2 {
        return Err(Error::invalid_record(
            id,
            format!("need at least 2 option log-probs, got {}", logprobs.len()),
        ));
    }
    if let Some(pos) = logprobs.iter().position(|z| !z.is_finite()) {
        return Err(Error::invalid_record(
            id,
            format!("option log-prob {pos} is not finite"),
        ));
    }
    let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logprobs.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Lowest index attaining the maximum probability.
pub fn predicted_option(token_probs: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in token_probs.iter().enumerate() {
        match best {
            Some((_, b)) if p <= b => {}
            _ => best = Some((i, p)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::invalid_record("<unnamed>", "empty probability vector"))
}

/// Fills log-probs the provider did not return with `min(returned) - 10`.
///
/// Returns the completed vector and the indices that were filled.
pub fn fill_missing_logprobs(id: &str, logprobs: &[Option<f64>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let floor = logprobs.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return Err(Error::invalid_record(id, "no option log-probs returned"));
    }
    let mut missing = Vec::new();
    let filled = logprobs
        .iter()
        .enumerate()
        .map(|(i, z)| {
            z.unwrap_or_else(|| {
                missing.push(i);
                floor - MISSING_LOGPROB_GAP
            })
        })
        .collect();
    Ok((filled, missing))
}

/// One line of the records JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub id: String,
    pub k: usize,
    #[serde(default)]
    pub option_logprobs: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub token_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub verbal: Option<Vec<f64>>,
    #[serde(default)]
    pub verbal_raw: Option<String>,
    #[serde(default)]
    pub verbal_missing_mask: Option<Vec<bool>>,
    pub gold_index: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// A validated multiple-choice instance carrying both confidence channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRecord {
    id: String,
    option_logprobs: Option<Vec<f64>>,
    token_probs: Vec<f64>,
    verbal: Vec<f64>,
    verbal_missing_mask: Vec<bool>,
    verbal_raw: Option<String>,
    verbal_source: Option<VerbalSource>,
    gold_index: usize,
    predicted_index: usize,
    meta: BTreeMap<String, String>,
    flags: Vec<String>,
}

impl ConfidenceRecord {
    /// Validates a JSONL line. `alphabet` is used only when the verbal
    /// channel has to be parsed from `verbal_raw`.
    pub fn from_line(line: RecordLine, alphabet: &LabelAlphabet) -> Result<Self> {
        let RecordLine {
            id,
            k,
            option_logprobs,
            token_probs,
            verbal,
            verbal_raw,
            verbal_missing_mask,
            gold_index,
            meta,
            mut flags,
        } = line;
        let bad = |reason: String| Error::invalid_record(id.clone(), reason);
        if k < 2 {
            return Err(bad(format!("k must be at least 2, got {k}")));
        }
        if gold_index >= k {
            return Err(bad(format!("gold_index {gold_index} out of range for k={k}")));
        }

        let (option_logprobs, token_probs) = match (option_logprobs, token_probs) {
            (None, None) => return Err(bad("one of option_logprobs/token_probs is required".into())),
            (Some(raw), given) => {
                if raw.len() != k {
                    return Err(bad(format!("option_logprobs has {} entries, expected {k}", raw.len())));
                }
                let (logprobs, missing) = fill_missing_logprobs(&id, &raw)?;
                if !missing.is_empty() && !flags.iter().any(|f| f.starts_with(FLAG_MISSING_TOKEN_LOGPROB)) {
                    let list: Vec<String> = missing.iter().map(usize::to_string).collect();
                    flags.push(format!("{FLAG_MISSING_TOKEN_LOGPROB}:{}", list.join(",")));
                }
                let probs = normalize_token_scores(&id, &logprobs)?;
                if let Some(given) = given {
                    if given.len() != k
                        || given
                            .iter()
                            .zip(&probs)
                            .any(|(g, p)| !((g - p).abs() <= SIMPLEX_TOLERANCE))
                    {
                        return Err(bad("token_probs disagree with softmax(option_logprobs)".into()));
                    }
                }
                (Some(logprobs), probs)
            }
            (None, Some(probs)) => {
                if probs.len() != k {
                    return Err(bad(format!("token_probs has {} entries, expected {k}", probs.len())));
                }
                if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(bad("token_probs entries must lie in [0, 1]".into()));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
                    return Err(bad(format!("token_probs sum to {total}, not 1")));
                }
                (None, probs)
            }
        };

        let (verbal, verbal_missing_mask, verbal_source) = match (verbal, &verbal_raw) {
            (Some(values), _) => {
                if values.len() != k {
                    return Err(bad(format!("verbal has {} entries, expected {k}", values.len())));
                }
                if values.iter().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err(bad("verbal entries must lie in [0, 1]".into()));
                }
                let mask = verbal_missing_mask.unwrap_or_else(|| vec![false; k]);
                if mask.len() != k {
                    return Err(bad(format!(
                        "verbal_missing_mask has {} entries, expected {k}",
                        mask.len()
                    )));
                }
                (values, mask, None)
            }
            (None, Some(raw)) => {
                let parsed = parse_verbal_response(raw, k, alphabet)?;
                (parsed.values, parsed.missing_mask, Some(parsed.source))
            }
            (None, None) => return Err(bad("one of verbal/verbal_raw is required".into())),
        };

        let predicted_index = predicted_option(&token_probs)?;
        Ok(ConfidenceRecord {
            id,
            option_logprobs,
            token_probs,
            verbal,
            verbal_missing_mask,
            verbal_raw,
            verbal_source,
            gold_index,
            predicted_index,
            meta,
            flags,
        })
    }

    /// Canonical JSONL representation.
    pub fn to_line(&self) -> RecordLine {
        RecordLine {
            id: self.id.clone(),
            k: self.k(),
            option_logprobs: self
                .option_logprobs
                .as_ref()
                .map(|z| z.iter().copied().map(Some).collect()),
            token_probs: Some(self.token_probs.clone()),
            verbal: Some(self.verbal.clone()),
            verbal_raw: self.verbal_raw.clone(),
            verbal_missing_mask: Some(self.verbal_missing_mask.clone()),
            gold_index: self.gold_index,
            meta: self.meta.clone(),
            flags: self.flags.clone(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn k(&self) -> usize {
        self.token_probs.len()
    }

    pub fn option_logprobs(&self) -> Option<&[f64]> {
        self.option_logprobs.as_deref()
    }

    pub fn token_probs(&self) -> &[f64] {
        &self.token_probs
    }

    pub fn verbal(&self) -> &[f64] {
        &self.verbal
    }

    pub fn verbal_missing_mask(&self) -> &[bool] {
        &self.verbal_missing_mask
    }

    pub fn verbal_raw(&self) -> Option<&str> {
        self.verbal_raw.as_deref()
    }

    /// How the verbal vector was obtained, when it was parsed at load time.
    pub fn verbal_source(&self) -> Option<VerbalSource> {
        self.verbal_source
    }

    pub fn gold_index(&self) -> usize {
        self.gold_index
    }

    pub fn predicted_index(&self) -> usize {
        self.predicted_index
    }

    pub fn correct(&self) -> bool {
        self.predicted_index == self.gold_index
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Fail on the first malformed line instead of skipping it.
    pub strict: bool,
    pub alphabet: LabelAlphabet,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            strict: true,
            alphabet: LabelAlphabet::Numeric,
        }
    }
}

#[derive(Debug)]
pub struct LoadReport {
    pub records: Vec<ConfidenceRecord>,
    /// Lines skipped in lenient mode, with the reason.
    pub skipped: Vec<Error>,
}

/// Deserializes one JSONL line, naming the offending field on failure.
pub(crate) fn deserialize_line<T: serde::de::DeserializeOwned>(text: &str, line_no: usize) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        // serde reports missing fields at the enclosing path
        let field = match message.strip_prefix("missing field `") {
            Some(rest) => rest.split('`').next().unwrap_or_default().to_string(),
            None => path,
        };
        Error::Schema {
            line: line_no,
            field,
            message,
        }
    })
}

fn parse_line(text: &str, line_no: usize, alphabet: &LabelAlphabet) -> Result<ConfidenceRecord> {
    ConfidenceRecord::from_line(deserialize_line(text, line_no)?, alphabet)
}

/// Parses records from any reader. Blank lines are ignored and CRLF line
/// endings are accepted.
pub fn read_records(reader: impl BufRead, options: &LoadOptions) -> Result<LoadReport> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("<line {line_no}>"), e))?;
        let text = line.strip_suffix('\r').unwrap_or(&line);
        if text.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(text, line_no, &options.alphabet).and_then(|record| {
            if seen.insert(record.id().to_string()) {
                Ok(record)
            } else {
                Err(Error::Schema {
                    line: line_no,
                    field: "id".into(),
                    message: format!("duplicate id `{}`", record.id()),
                })
            }
        });
        match parsed {
            Ok(record) => records.push(record),
            Err(e) if options.strict => return Err(e),
            Err(e) => {
                log::warn!("skipping line {line_no}: {e}");
                skipped.push(e);
            }
        }
    }
    Ok(LoadReport { records, skipped })
}

pub fn load_records(path: impl AsRef<Path>, options: &LoadOptions) -> Result<LoadReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(file), options)
}

pub fn write_records<'a>(
    writer: impl Write,
    records: impl IntoIterator<Item = &'a ConfidenceRecord>,
) -> std::io::Result<()> {
    let mut writer = writer;
    for record in records {
        serde_json::to_writer(&mut writer, &record.to_line())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_records(records: &[ConfidenceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Calibration,
    Validation,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Calibration => "calibration",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub calibration: f64,
    pub validation: f64,
    pub seed: u64,
    #[serde(default)]
    pub folds: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            calibration: 0.5,
            validation: 0.2,
            seed: 0,
            folds: None,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.calibration) || !ok(self.validation) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if self.calibration + self.validation > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "calibration + validation fractions exceed 1 ({} + {})",
                self.calibration, self.validation
            )));
        }
        if matches!(self.folds, Some(f) if f < 2) {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub split: SplitTag,
    /// Fold index within the calibration+validation pool, when cross-fitting.
    pub fold: Option<usize>,
}

/// Record id to split mapping.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    entries: BTreeMap<String, Assignment>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Assignment> {
        self.entries.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Assignment)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids_in(&self, split: SplitTag) -> BTreeSet<&str> {
        self.iter()
            .filter(|(_, a)| a.split == split)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count(&self, split: SplitTag) -> usize {
        self.entries.values().filter(|a| a.split == split).count()
    }

    /// Hex SHA-256 over sorted `id<TAB>split<TAB>fold` lines.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (id, a) in &self.entries {
            let fold = a.fold.map(|f| f.to_string()).unwrap_or_default();
            hasher.update(format!("{id}\t{}\t{fold}\n", a.split.as_str()).as_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic split over ids. Ids are sorted before shuffling, so the
/// result does not depend on input order.
pub fn split_ids<'a>(ids: impl IntoIterator<Item = &'a str>, config: &SplitConfig) -> Result<SplitAssignment> {
    config.validate()?;
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate record id `{}`", w[0])));
    }
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    ids.shuffle(&mut rng);

    let n_cal = ((n as f64) * config.calibration).round() as usize;
    let n_cal = n_cal.min(n);
    let n_val = (((n as f64) * config.validation).round() as usize).min(n - n_cal);
    let pool = n_cal + n_val;
    if let Some(folds) = config.folds {
        if pool < folds {
            return Err(Error::Config(format!(
                "{pool} calibration+validation records cannot fill {folds} folds"
            )));
        }
    }

    let mut entries = BTreeMap::new();
    for (pos, id) in ids.into_iter().enumerate() {
        let split = if pos < n_cal {
            SplitTag::Calibration
        } else if pos < pool {
            SplitTag::Validation
        } else {
            SplitTag::Test
        };
        let fold = match config.folds {
            Some(folds) if pos < pool => Some(fold_of(pos, pool, folds)),
            _ => None,
        };
        entries.insert(id.to_string(), Assignment { split, fold });
    }
    Ok(SplitAssignment { entries })
}

pub fn split_dataset(records: &[ConfidenceRecord], config: &SplitConfig) -> Result<SplitAssignment> {
    split_ids(records.iter().map(|r| r.id()), config)
}

/// Contiguous folds; the first `pool % folds` folds get one extra member.
fn fold_of(pos: usize, pool: usize, folds: usize) -> usize {
    let base = pool / folds;
    let extra = pool % folds;
    let big = extra * (base + 1);
    if pos < big {
        pos / (base + 1)
    } else {
        extra + (pos - big) / base
    }
}
