//! Result serialization: the full analysis report, the per-class
//! summary table, and binned attribution curves for plotting.

use crate::corpus::{ClassLabel, CorpusStats};
use crate::ig::{AttributionVector, IgConfig};
use crate::nn::ModelConfig;
use crate::scoring::{
    aggregate, per_class_table, DatasetScore, PerClassTable, RegionScores, ScoredSample,
    ScoringError,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Identifies what produced a report: architecture name plus a digest
/// of the full model configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub arch: String,
    pub window: usize,
    /// SHA-256 over the canonical JSON of the model configuration.
    pub config_digest: String,
}

impl ModelInfo {
    pub fn of(cfg: &ModelConfig) -> Self {
        let canonical = serde_json::to_vec(cfg).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Self {
            arch: cfg.arch.name().to_string(),
            window: cfg.window,
            config_digest: hex,
        }
    }
}

/// Everything recorded about one analyzed file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label: ClassLabel,
    pub file_len: u64,
    pub scores: RegionScores,
    pub completeness_residual: f64,
    /// Malware score of the unmodified input.
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub model: ModelInfo,
    pub ig: IgConfig,
    /// Path-sorted; the dataset fields below are recomputable from
    /// these records.
    pub samples: Vec<SampleRecord>,
    pub dataset: DatasetScore,
    pub per_class: PerClassTable,
    pub corpus: CorpusStats,
}

fn to_scored(samples: &[SampleRecord]) -> Vec<ScoredSample> {
    samples
        .iter()
        .map(|s| ScoredSample {
            id: s.path.clone(),
            label: s.label,
            scores: s.scores,
        })
        .collect()
}

/// Assemble a report from per-sample results, deriving the dataset
/// score and per-class table.
pub fn build_report(
    model: ModelInfo,
    ig: IgConfig,
    mut samples: Vec<SampleRecord>,
    corpus: CorpusStats,
) -> Result<AnalysisReport, ScoringError> {
    samples.sort_by(|a, b| a.path.cmp(&b.path));
    let scored = to_scored(&samples);
    Ok(AnalysisReport {
        model,
        ig,
        dataset: aggregate(&scored)?,
        per_class: per_class_table(&scored)?,
        samples,
        corpus,
    })
}

/// Re-derive the dataset score from a (possibly parsed-back) report's
/// per-sample records — the self-consistency check behind `score`.
pub fn recompute(report: &AnalysisReport) -> Result<(DatasetScore, PerClassTable), ScoringError> {
    let scored = to_scored(&report.samples);
    Ok((aggregate(&scored)?, per_class_table(&scored)?))
}

/// Canonical JSON emission: stable field order, shortest round-trip
/// float formatting, trailing newline.
pub fn emit_json(report: &AnalysisReport) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
    out.push(b'\n');
    out
}

pub fn parse_json(bytes: &[u8]) -> Result<AnalysisReport, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// Summary CSV: one row per class with the region columns in the
/// fixed order DOS, Slack, .text, Overlay, Aggregate.
pub fn emit_summary_csv(report: &AnalysisReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "class",
        "dos",
        "slack",
        "text",
        "overlay",
        "aggregate",
    ])
    .expect("csv header");
    for row in &report.per_class.rows {
        let agg = row.mean_text - (row.mean_dos + row.mean_slack + row.mean_overlay);
        w.write_record([
            report.model.arch.clone(),
            row.label.name().to_string(),
            format!("{}", row.mean_dos),
            format!("{}", row.mean_slack),
            format!("{}", row.mean_text),
            format!("{}", row.mean_overlay),
            format!("{agg}"),
        ])
        .expect("csv row");
    }
    w.into_inner().expect("csv buffer")
}

/// Signed attribution mass folded into equal-width byte bins across
/// the model window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedAttribution {
    pub n_bins: usize,
    /// `n_bins × bin_width ≥ window`.
    pub bin_width: usize,
    /// Mean signed value over every (sample, position) pair that fell
    /// in the bin; 0.0 where nothing fell.
    pub means: Vec<f64>,
    pub sums: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Bucket attribution vectors by byte offset.  Positions past a
/// sample's own length contribute nothing.
pub fn bin_attributions(
    attrs: &[AttributionVector],
    n_bins: usize,
    window: usize,
) -> BinnedAttribution {
    assert!(n_bins >= 1, "need at least one bin");
    let bin_width = window.div_ceil(n_bins).max(1);
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    for attr in attrs {
        for (pos, &v) in attr.values.iter().enumerate() {
            let bin = (pos / bin_width).min(n_bins - 1);
            sums[bin] += v;
            counts[bin] += 1;
        }
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    BinnedAttribution {
        n_bins,
        bin_width,
        means,
        sums,
        counts,
    }
}

/// Plot-ready CSV with columns `bin_start,bin_end,mean_attr`.
pub fn emit_bins_csv(b: &BinnedAttribution) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_start", "bin_end", "mean_attr"])
        .expect("csv header");
    for (i, mean) in b.means.iter().enumerate() {
        w.write_record([
            format!("{}", i * b.bin_width),
            format!("{}", (i + 1) * b.bin_width),
            format!("{mean}"),
        ])
        .expect("csv row");
    }
    w.into_inner().expect("csv buffer")
}

/// One row of an externally published region-relevance table, used as
/// a bounds fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub class: ClassLabel,
    pub dos: f64,
    pub slack: f64,
    pub text: f64,
    pub overlay: f64,
}

impl ReferenceRow {
    pub fn class_aggregate(&self) -> f64 {
        self.text - (self.dos + self.slack + self.overlay)
    }
}

/// Check that a published row satisfies the same invariants this
/// pipeline guarantees for its own ratios.
pub fn validate_reference_row(row: &ReferenceRow) -> Result<(), String> {
    for (name, v) in [
        ("dos", row.dos),
        ("slack", row.slack),
        ("text", row.text),
        ("overlay", row.overlay),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{} {name} ratio {v} outside [0, 1]", row.model));
        }
    }
    let sum = row.dos + row.slack + row.text + row.overlay;
    if sum > 1.0 + 1e-9 {
        return Err(format!("{} four-ratio sum {sum} exceeds 1", row.model));
    }
    Ok(())
}

/// Check a published aggregate score's range.
pub fn validate_reference_aggregate(aggregate: f64) -> Result<(), String> {
    if (-1.0..=1.0).contains(&aggregate) {
        Ok(())
    } else {
        Err(format!("aggregate {aggregate} outside [-1, 1]"))
    }
}
