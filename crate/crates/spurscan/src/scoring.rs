//! Region-wise attribution mass and the spuriousness aggregate.
//!
//! For one sample, each region's score is the squared L2 norm of the
//! attribution values falling inside that region, normalized by the
//! squared norm of the whole vector.  The dataset aggregate contrasts
//! the executable-section share against the three regions a PE can
//! carry without executing them:
//!
//! `aggregate = mean r_text − (mean r_dos + mean r_slack + mean r_overlay)`
//!
//! Positive means the detectors lean on code; negative or zero means
//! freely attacker-controllable bytes dominate.

use crate::corpus::ClassLabel;
use crate::ig::AttributionVector;
use crate::pe_map::{select, RegionKind, RegionMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Share of attribution mass per region for one sample.  Ratios lie in
/// `[0, 1]`; they need not sum to 1 because headers and non-executable
/// section content are not reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub r_dos: f64,
    pub r_slack: f64,
    pub r_overlay: f64,
    pub r_text: f64,
    pub total_sq_norm: f64,
    /// True when the attribution vector had zero mass; such samples
    /// carry no ratio information and are excluded from aggregation.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub label: ClassLabel,
    pub scores: RegionScores,
}

/// Dataset-level means and the headline aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub mean_dos: f64,
    pub mean_slack: f64,
    pub mean_overlay: f64,
    pub mean_text: f64,
    pub aggregate: f64,
    /// Samples that entered the means.
    pub n_samples: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: ClassLabel,
    pub n: usize,
    pub n_skipped: usize,
    pub mean_dos: f64,
    pub mean_slack: f64,
    pub mean_overlay: f64,
    pub mean_text: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassTable {
    /// One row per class present in the input, goodware first.
    pub rows: Vec<ClassRow>,
    pub combined: DatasetScore,
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("every sample had zero attribution mass; nothing to aggregate")]
    AllSkipped,
}

fn sq_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum()
}

/// Partition one sample's attribution mass across regions.  The
/// attribution vector only covers `min(file_len, window)` bytes, so
/// regions are implicitly intersected with the model window.
pub fn sample_scores(attr: &AttributionVector, map: &RegionMap) -> RegionScores {
    let values = &attr.values;
    let total = sq_norm(values);
    if total == 0.0 {
        return RegionScores {
            r_dos: 0.0,
            r_slack: 0.0,
            r_overlay: 0.0,
            r_text: 0.0,
            total_sq_norm: 0.0,
            skipped: true,
        };
    }
    let ratio = |kind: RegionKind| sq_norm(&select(values, map, kind)) / total;
    RegionScores {
        r_dos: ratio(RegionKind::Dos),
        r_slack: ratio(RegionKind::Slack),
        r_overlay: ratio(RegionKind::Overlay),
        // Code selects the executable section's content; absent one,
        // select() returns nothing and the share is 0 — the sample
        // still counts.
        r_text: ratio(RegionKind::Code),
        total_sq_norm: total,
        skipped: false,
    }
}

struct RatioSums {
    dos: f64,
    slack: f64,
    overlay: f64,
    text: f64,
    n: usize,
    n_skipped: usize,
}

/// Sum ratios over id-sorted samples so the reduction order — and
/// therefore every bit of the result — is independent of input order.
fn sorted_sums<'a>(samples: impl Iterator<Item = &'a ScoredSample>) -> RatioSums {
    let mut ordered: Vec<&ScoredSample> = samples.collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut sums = RatioSums {
        dos: 0.0,
        slack: 0.0,
        overlay: 0.0,
        text: 0.0,
        n: 0,
        n_skipped: 0,
    };
    for s in ordered {
        if s.scores.skipped {
            sums.n_skipped += 1;
            continue;
        }
        sums.dos += s.scores.r_dos;
        sums.slack += s.scores.r_slack;
        sums.overlay += s.scores.r_overlay;
        sums.text += s.scores.r_text;
        sums.n += 1;
    }
    sums
}

/// Mean the per-sample ratios and form the aggregate.
pub fn aggregate(samples: &[ScoredSample]) -> Result<DatasetScore, ScoringError> {
    let sums = sorted_sums(samples.iter());
    if sums.n == 0 {
        return Err(ScoringError::AllSkipped);
    }
    let n = sums.n as f64;
    let (mean_dos, mean_slack, mean_overlay, mean_text) =
        (sums.dos / n, sums.slack / n, sums.overlay / n, sums.text / n);
    Ok(DatasetScore {
        mean_dos,
        mean_slack,
        mean_overlay,
        mean_text,
        aggregate: mean_text - (mean_dos + mean_slack + mean_overlay),
        n_samples: sums.n,
        n_skipped: sums.n_skipped,
    })
}

/// Per-class means plus the combined score, for the two-row report
/// table.  Classes with no samples in the input get no row.
pub fn per_class_table(samples: &[ScoredSample]) -> Result<PerClassTable, ScoringError> {
    let mut rows = Vec::new();
    for label in [ClassLabel::Goodware, ClassLabel::Malware] {
        let class: Vec<&ScoredSample> =
            samples.iter().filter(|s| s.label == label).collect();
        if class.is_empty() {
            continue;
        }
        let sums = sorted_sums(class.into_iter());
        let n = (sums.n as f64).max(1.0); // all-skipped class: means stay 0
        rows.push(ClassRow {
            label,
            n: sums.n,
            n_skipped: sums.n_skipped,
            mean_dos: sums.dos / n,
            mean_slack: sums.slack / n,
            mean_overlay: sums.overlay / n,
            mean_text: sums.text / n,
        });
    }
    Ok(PerClassTable {
        rows,
        combined: aggregate(samples)?,
    })
}
