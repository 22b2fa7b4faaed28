//! Report files: `metrics.json`, `reliability_bins.csv` and
//! `risk_coverage.csv`. Output bytes depend only on the report contents.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::pipeline::Channel;

pub const METRICS_FILE: &str = "metrics.json";
pub const BINS_FILE: &str = "reliability_bins.csv";
pub const RISK_COVERAGE_FILE: &str = "risk_coverage.csv";

/// Output of an evaluation run: the overall report and optional per-group
/// reports keyed by a meta value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationDocument {
    pub channel: Channel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub overall: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, MetricReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub bins: PathBuf,
    pub risk_coverage: PathBuf,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn bins_csv(report: &MetricReport) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lower", "upper", "count", "mean_confidence", "empirical_accuracy"])?;
    for b in &report.bins {
        w.write_record([
            b.lower.to_string(),
            b.upper.to_string(),
            b.count.to_string(),
            opt(b.mean_confidence),
            opt(b.empirical_accuracy),
        ])?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn risk_coverage_csv(report: &MetricReport) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "risk"])?;
    for p in &report.rc_points {
        w.write_record([p.coverage.to_string(), p.risk.to_string()])?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn to_pretty_json<T: Serialize>(value: &T, context: &str) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: context.to_string(),
        source,
    })?;
    text.push('\n');
    Ok(text)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the three report files into `dir`, creating it if needed.
pub fn write_report(report: &MetricReport, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        metrics: dir.join(METRICS_FILE),
        bins: dir.join(BINS_FILE),
        risk_coverage: dir.join(RISK_COVERAGE_FILE),
    };
    write(&files.metrics, to_pretty_json(report, "metric report")?.as_bytes())?;
    let bins = bins_csv(report).map_err(|e| csv_error(&files.bins, e))?;
    write(&files.bins, &bins)?;
    let rc = risk_coverage_csv(report).map_err(|e| csv_error(&files.risk_coverage, e))?;
    write(&files.risk_coverage, &rc)?;
    Ok(files)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Overall report into `dir`; each group into `dir/group-<value>/`.
pub fn write_document(doc: &EvaluationDocument, dir: impl AsRef<Path>) -> Result<Vec<ReportFiles>> {
    let dir = dir.as_ref();
    let mut written = vec![write_report(&doc.overall, dir)?];
    for (group, report) in &doc.groups {
        written.push(write_report(report, dir.join(format!("group-{}", sanitize(group))))?);
    }
    Ok(written)
}
