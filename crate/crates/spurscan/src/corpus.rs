//! Labeled PE corpus ingestion and window-coverage statistics.
//!
//! A corpus is described by a CSV manifest (`path,label,family`) or by
//! a directory laid out as `<dir>/{goodware,malware}/<family?>/file`.
//! [`scan`] reads and parses every file, records failures without
//! aborting the batch, and reports how much of the corpus each model
//! window actually covers.

use crate::pe_map::{parse_pe, PeLayout};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Ground-truth class of a corpus entry.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Goodware,
    Malware,
}

impl ClassLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "goodware" => Some(Self::Goodware),
            "malware" => Some(Self::Malware),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Goodware => "goodware",
            Self::Malware => "malware",
        }
    }

    /// Training target for the malware probability.
    pub fn target(self) -> f64 {
        match self {
            Self::Goodware => 0.0,
            Self::Malware => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: ClassLabel,
    pub family: Option<String>,
}

/// Validated list of corpus files.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest header must be `path,label,family`, got {0:?}")]
    BadHeader(String),
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(String),
    #[error("unknown label {0:?} (expected `goodware` or `malware`)")]
    BadLabel(String),
    #[error("malformed manifest csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("scanning corpus directory: {0}")]
    Walk(#[from] walkdir::Error),
}

/// Parse and validate a `path,label,family` CSV manifest.
pub fn load_manifest(bytes: &[u8]) -> Result<CorpusManifest, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader.headers()?.clone();
    let fields: Vec<&str> = header.iter().collect();
    if fields != ["path", "label", "family"] {
        return Err(CorpusError::BadHeader(fields.join(",")));
    }

    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record?;
        let path = record.get(0).unwrap_or("");
        if path.is_empty() {
            return Err(CorpusError::BadHeader("row with empty path".into()));
        }
        if !seen.insert(path.to_string()) {
            return Err(CorpusError::DuplicatePath(path.into()));
        }
        let raw_label = record.get(1).unwrap_or("");
        let label = ClassLabel::parse(raw_label)
            .ok_or_else(|| CorpusError::BadLabel(raw_label.into()))?;
        let family = match record.get(2) {
            None | Some("") => None,
            Some(f) => Some(f.to_string()),
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(path),
            label,
            family,
        });
    }
    Ok(CorpusManifest { entries })
}

/// Build a manifest from a `<dir>/{goodware,malware}/<family?>/file`
/// layout.  Files directly under a class directory have no family;
/// nested files take the first subdirectory as family.  Entries come
/// back path-sorted so downstream processing is order-independent.
pub fn scan_dir(dir: &Path) -> Result<CorpusManifest, CorpusError> {
    let mut entries = Vec::new();
    for label in [ClassLabel::Goodware, ClassLabel::Malware] {
        let class_dir = dir.join(label.name());
        if !class_dir.is_dir() {
            continue;
        }
        for item in walkdir::WalkDir::new(&class_dir).sort_by_file_name() {
            let item = item?;
            if !item.file_type().is_file() {
                continue;
            }
            let rel = item
                .path()
                .strip_prefix(&class_dir)
                .expect("walkdir stays under its root");
            let family = rel
                .components()
                .next()
                .filter(|_| rel.components().count() > 1)
                .map(|c| c.as_os_str().to_string_lossy().into_owned());
            entries.push(ManifestEntry {
                path: item.path().to_path_buf(),
                label,
                family,
            });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(CorpusManifest { entries })
}

/// Upper edges of the file-size histogram, in bytes (final bucket is
/// open-ended).
pub const SIZE_BUCKET_EDGES: [u64; 7] = [
    1 << 10,
    4 << 10,
    16 << 10,
    64 << 10,
    256 << 10,
    1 << 20,
    4 << 20,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub lo: u64,
    /// `None` marks the open-ended last bucket.
    pub hi: Option<u64>,
    pub count: usize,
}

/// Corpus coverage statistics over the *parsed* files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_total: usize,
    pub n_parsed: usize,
    pub n_rejected: usize,
    /// window size → number of parsed files strictly larger than it.
    pub n_over_window: BTreeMap<usize, usize>,
    pub size_histogram: Vec<SizeBucket>,
}

impl CorpusStats {
    fn empty(windows: &[usize]) -> Self {
        let mut edges: Vec<(u64, Option<u64>)> = Vec::new();
        let mut lo = 0;
        for hi in SIZE_BUCKET_EDGES {
            edges.push((lo, Some(hi)));
            lo = hi;
        }
        edges.push((lo, None));
        Self {
            n_total: 0,
            n_parsed: 0,
            n_rejected: 0,
            n_over_window: windows.iter().map(|&w| (w, 0)).collect(),
            size_histogram: edges
                .into_iter()
                .map(|(lo, hi)| SizeBucket { lo, hi, count: 0 })
                .collect(),
        }
    }

    fn record_parsed(&mut self, len: usize) {
        self.n_parsed += 1;
        for (&window, count) in self.n_over_window.iter_mut() {
            if len > window {
                *count += 1;
            }
        }
        let bucket = self
            .size_histogram
            .iter_mut()
            .find(|b| b.hi.is_none_or(|hi| (len as u64) < hi))
            .expect("last bucket is open-ended");
        bucket.count += 1;
    }
}

/// A corpus file that parsed, ready for analysis.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub entry: ManifestEntry,
    pub bytes: Vec<u8>,
    pub layout: PeLayout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug)]
pub struct ScannedCorpus {
    pub files: Vec<CorpusFile>,
    pub rejected: Vec<RejectedFile>,
    pub stats: CorpusStats,
}

/// Read and parse every manifest entry.  Per-file failures (I/O or
/// PE parse) are recorded as rejections; the batch never aborts.
/// Relative manifest paths resolve against `base`.
pub fn scan(manifest: &CorpusManifest, base: &Path, windows: &[usize]) -> ScannedCorpus {
    let mut out = ScannedCorpus {
        files: Vec::new(),
        rejected: Vec::new(),
        stats: CorpusStats::empty(windows),
    };
    for entry in &manifest.entries {
        out.stats.n_total += 1;
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        let reject = |out: &mut ScannedCorpus, reason: String| {
            out.stats.n_rejected += 1;
            out.rejected.push(RejectedFile {
                path: entry.path.clone(),
                reason,
            });
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                reject(&mut out, format!("read failed: {e}"));
                continue;
            }
        };
        match parse_pe(&bytes) {
            Ok(layout) => {
                out.stats.record_parsed(bytes.len());
                out.files.push(CorpusFile {
                    entry: entry.clone(),
                    bytes,
                    layout,
                });
            }
            Err(e) => reject(&mut out, format!("not analyzable: {e}")),
        }
    }
    debug_assert_eq!(
        out.stats.n_parsed + out.stats.n_rejected,
        out.stats.n_total
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::minimal_pe;

    #[test]
    fn manifest_two_rows_parses() {
        let csv = b"path,label,family\na.exe,goodware,\nb.exe,malware,zeus\n";
        let m = load_manifest(csv).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].label, ClassLabel::Goodware);
        assert_eq!(m.entries[0].family, None);
        assert_eq!(m.entries[1].family.as_deref(), Some("zeus"));
    }

    #[test]
    fn manifest_rejects_unknown_label() {
        let csv = b"path,label,family\na.exe,benignware,\n";
        assert!(matches!(
            load_manifest(csv),
            Err(CorpusError::BadLabel(l)) if l == "benignware"
        ));
    }

    #[test]
    fn manifest_rejects_empty_file_and_wrong_header() {
        assert!(matches!(load_manifest(b""), Err(CorpusError::BadHeader(_))));
        assert!(matches!(
            load_manifest(b"file,class,family\na,goodware,\n"),
            Err(CorpusError::BadHeader(_))
        ));
    }

    #[test]
    fn manifest_rejects_duplicate_path() {
        let csv = b"path,label,family\na.exe,goodware,\na.exe,malware,\n";
        assert!(matches!(
            load_manifest(csv),
            Err(CorpusError::DuplicatePath(p)) if p == "a.exe"
        ));
    }

    fn write_corpus(dir: &Path, files: &[(&str, Vec<u8>)]) -> CorpusManifest {
        let mut rows = String::from("path,label,family\n");
        for (name, bytes) in files {
            fs::write(dir.join(name), bytes).unwrap();
            let label = if name.starts_with("mal") {
                "malware"
            } else {
                "goodware"
            };
            rows.push_str(&format!("{name},{label},\n"));
        }
        load_manifest(rows.as_bytes()).unwrap()
    }

    #[test]
    fn scan_counts_window_exceedance() {
        let tmp = tempfile::tempdir().unwrap();
        let m = write_corpus(
            tmp.path(),
            &[
                ("good_small.exe", minimal_pe(0x500)),
                ("good_mid.exe", minimal_pe(0x1500)),
                ("mal_big.exe", minimal_pe(0x5000)),
            ],
        );
        let scanned = scan(&m, tmp.path(), &[0x1000, 0x4000]);
        assert_eq!(scanned.stats.n_total, 3);
        assert_eq!(scanned.stats.n_parsed, 3);
        assert_eq!(scanned.stats.n_over_window[&0x1000], 2);
        assert_eq!(scanned.stats.n_over_window[&0x4000], 1);
    }

    #[test]
    fn scan_stats_match_brute_force_recount() {
        let tmp = tempfile::tempdir().unwrap();
        let sizes = [0x400usize, 0x500, 0x900, 0x2200, 0x500, 0x11000];
        let files: Vec<(String, Vec<u8>)> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (format!("good_{i}.exe"), minimal_pe(n)))
            .collect();
        let refs: Vec<(&str, Vec<u8>)> = files
            .iter()
            .map(|(n, b)| (n.as_str(), b.clone()))
            .collect();
        let m = write_corpus(tmp.path(), &refs);
        let windows = [0x480usize, 0x1000];
        let scanned = scan(&m, tmp.path(), &windows);

        // independent recount straight from the size list
        for &w in &windows {
            let want = sizes.iter().filter(|&&n| n > w).count();
            assert_eq!(scanned.stats.n_over_window[&w], want, "window {w:#x}");
        }
        let total_binned: usize = scanned.stats.size_histogram.iter().map(|b| b.count).sum();
        assert_eq!(total_binned, sizes.len());
        for bucket in &scanned.stats.size_histogram {
            let want = sizes
                .iter()
                .filter(|&&n| {
                    n as u64 >= bucket.lo && bucket.hi.is_none_or(|hi| (n as u64) < hi)
                })
                .count();
            assert_eq!(bucket.count, want, "bucket {:?}", bucket);
        }
    }

    #[test]
    fn scan_records_rejections_without_aborting() {
        let tmp = tempfile::tempdir().unwrap();
        let m = write_corpus(
            tmp.path(),
            &[
                ("good_ok.exe", minimal_pe(0x500)),
                ("good_text.exe", b"just text, not a pe".to_vec()),
            ],
        );
        // one manifest row pointing nowhere
        let mut m = m;
        m.entries.push(ManifestEntry {
            path: PathBuf::from("missing.exe"),
            label: ClassLabel::Malware,
            family: None,
        });
        let scanned = scan(&m, tmp.path(), &[0x1000]);
        assert_eq!(scanned.stats.n_total, 3);
        assert_eq!(scanned.stats.n_parsed, 1);
        assert_eq!(scanned.stats.n_rejected, 2);
        assert_eq!(scanned.files.len(), 1);
        assert_eq!(scanned.rejected.len(), 2);
    }

    #[test]
    fn scan_empty_corpus_gives_zero_stats() {
        let scanned = scan(&CorpusManifest::default(), Path::new("."), &[0x1000]);
        assert_eq!(scanned.stats.n_total, 0);
        assert_eq!(scanned.stats.n_parsed, 0);
        assert_eq!(scanned.stats.n_rejected, 0);
        assert_eq!(scanned.stats.n_over_window[&0x1000], 0);
        assert!(scanned.stats.size_histogram.iter().all(|b| b.count == 0));
    }

    #[test]
    fn scan_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let m = write_corpus(
            tmp.path(),
            &[
                ("good_a.exe", minimal_pe(0x500)),
                ("mal_b.exe", minimal_pe(0x900)),
            ],
        );
        let a = scan(&m, tmp.path(), &[0x600]);
        let b = scan(&m, tmp.path(), &[0x600]);
        assert_eq!(a.stats, b.stats);
        assert_eq!(
            a.files.iter().map(|f| &f.entry.path).collect::<Vec<_>>(),
            b.files.iter().map(|f| &f.entry.path).collect::<Vec<_>>()
        );
    }

    #[test]
    fn scan_dir_builds_sorted_manifest_with_families() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        fs::create_dir_all(root.join("goodware/office")).unwrap();
        fs::create_dir_all(root.join("malware")).unwrap();
        fs::write(root.join("goodware/office/w.exe"), minimal_pe(0x500)).unwrap();
        fs::write(root.join("goodware/plain.exe"), minimal_pe(0x500)).unwrap();
        fs::write(root.join("malware/z.exe"), minimal_pe(0x500)).unwrap();
        fs::write(root.join("README.txt"), b"ignored").unwrap();

        let m = scan_dir(root).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[0].label, ClassLabel::Goodware);
        assert_eq!(m.entries[0].family.as_deref(), Some("office"));
        assert_eq!(m.entries[1].family, None);
        assert_eq!(m.entries[2].label, ClassLabel::Malware);
        assert!(m.entries.windows(2).all(|w| w[0].path < w[1].path));
    }
}
