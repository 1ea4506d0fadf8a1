//! Minimal PE parser and byte-region partition.
//!
//! Parses just enough of the Portable Executable format (DOS header,
//! PE signature, COFF header, `SizeOfHeaders`, section table) to split a
//! file into disjoint byte regions: DOS area, PE headers, per-section
//! content, slack, and overlay.  Regions are computed on raw file
//! offsets, never on virtual addresses, because the detectors under
//! audit consume the on-disk byte stream.
//!
//! The partition is exhaustive: every byte of the file belongs to
//! exactly one region, even for hostile or malformed section tables.

use serde::{Deserialize, Serialize};
use std::fmt;

/// DOS `MZ` magic.
const DOS_MAGIC: [u8; 2] = *b"MZ";
/// `PE\0\0` signature.
const PE_SIGNATURE: [u8; 4] = [b'P', b'E', 0, 0];
/// Offset of `e_lfanew` inside the DOS header.
const E_LFANEW_OFFSET: usize = 0x3C;
/// Size of the DOS header.
const DOS_HEADER_SIZE: usize = 0x40;
/// Size of the COFF header following the PE signature.
const COFF_HEADER_SIZE: usize = 20;
/// Size of one section-table entry.
const SECTION_HEADER_SIZE: usize = 40;
/// IMAGE_SCN_MEM_EXECUTE.
pub const SCN_MEM_EXECUTE: u32 = 0x2000_0000;

/// Errors raised while parsing a PE file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeError {
    /// Missing `MZ` magic or `PE\0\0` signature, or `e_lfanew` below the
    /// DOS header boundary.
    NotPe(&'static str),
    /// The file is too short for a structure it claims to contain.
    Truncated(&'static str),
}

impl fmt::Display for PeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeError::NotPe(what) => write!(f, "not a PE file: {what}"),
            PeError::Truncated(what) => write!(f, "truncated file: {what}"),
        }
    }
}

impl std::error::Error for PeError {}

/// Half-open byte range `[start, end)` within one file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ByteInterval {
    pub start: u64,
    pub end: u64,
}

impl ByteInterval {
    pub fn new(start: u64, end: u64) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, offset: u64) -> bool {
        self.start <= offset && offset < self.end
    }
}

/// One row of the section table, spans already clamped to the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionEntry {
    /// Section name with trailing NULs stripped.
    pub name: String,
    /// File offset of the raw data, clamped to the file length.
    pub ptr_raw: u64,
    /// Raw data size on disk, clamped so `ptr_raw + size_raw <= file_len`.
    pub size_raw: u64,
    /// In-memory size as declared; not clamped (it is not a file span).
    pub virtual_size: u64,
    /// Raw characteristics bitmask.
    pub characteristics: u32,
    /// Characteristics bit 0x20000000.
    pub is_executable: bool,
}

impl SectionEntry {
    /// End of the raw span on disk.
    pub fn raw_end(&self) -> u64 {
        self.ptr_raw + self.size_raw
    }
}

/// Header offsets and section table of one parsed PE file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeLayout {
    /// Offset of the `PE\0\0` signature.
    pub e_lfanew: u64,
    /// Declared end of the header area (`SizeOfHeaders`).
    pub size_of_headers: u64,
    /// Sections in table order.
    pub sections: Vec<SectionEntry>,
    /// Total file length.
    pub file_len: u64,
    /// Set when section spans overlap, exceed the file length, or the
    /// optional header is too small to carry `SizeOfHeaders`.
    pub malformed: bool,
}

/// Region kinds a byte can belong to.
///
/// `Code` is not a partition member of its own: it selects the content
/// of the first executable section, a subset of `Content`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Dos,
    PeHeaders,
    Content,
    Slack,
    Overlay,
    Code,
}

impl RegionKind {
    /// The five kinds that partition the file exhaustively.
    pub const PARTITION: [RegionKind; 5] = [
        RegionKind::Dos,
        RegionKind::PeHeaders,
        RegionKind::Content,
        RegionKind::Slack,
        RegionKind::Overlay,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            RegionKind::Dos => "dos",
            RegionKind::PeHeaders => "pe_headers",
            RegionKind::Content => "content",
            RegionKind::Slack => "slack",
            RegionKind::Overlay => "overlay",
            RegionKind::Code => "code",
        }
    }
}

/// Disjoint, exhaustive partition of one file into region intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    pub dos: Vec<ByteInterval>,
    pub pe_headers: Vec<ByteInterval>,
    /// Content intervals per section, in table order.  A section that
    /// lost all its bytes to earlier claims has an empty list.
    pub content: Vec<Vec<ByteInterval>>,
    pub slack: Vec<ByteInterval>,
    pub overlay: Vec<ByteInterval>,
    /// First executable section, if any.
    pub code_section_index: Option<usize>,
    pub file_len: u64,
}

impl RegionMap {
    /// Intervals of one kind, sorted by start offset.
    pub fn intervals(&self, kind: RegionKind) -> Vec<ByteInterval> {
        let mut ivs: Vec<ByteInterval> = match kind {
            RegionKind::Dos => self.dos.clone(),
            RegionKind::PeHeaders => self.pe_headers.clone(),
            RegionKind::Content => self.content.iter().flatten().copied().collect(),
            RegionKind::Slack => self.slack.clone(),
            RegionKind::Overlay => self.overlay.clone(),
            RegionKind::Code => match self.code_section_index {
                Some(i) => self.content[i].clone(),
                None => Vec::new(),
            },
        };
        ivs.retain(|iv| !iv.is_empty());
        ivs.sort();
        ivs
    }

    /// All partition intervals with their kind, sorted by start offset.
    pub fn labeled_intervals(&self) -> Vec<(RegionKind, ByteInterval)> {
        let mut out = Vec::new();
        for kind in RegionKind::PARTITION {
            for iv in self.intervals(kind) {
                out.push((kind, iv));
            }
        }
        out.sort_by_key(|(_, iv)| *iv);
        out
    }
}

fn read_u16(data: &[u8], offset: usize) -> u16 {
    u16::from_le_bytes([data[offset], data[offset + 1]])
}

fn read_u32(data: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes([
        data[offset],
        data[offset + 1],
        data[offset + 2],
        data[offset + 3],
    ])
}

fn section_name(raw: &[u8]) -> String {
    let len = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
    String::from_utf8_lossy(&raw[..len]).into_owned()
}

/// Parse the headers and section table of a PE file.
///
/// Never panics on hostile input: structural lies about section spans
/// are clamped and flagged via [`PeLayout::malformed`]; only a missing
/// magic/signature or a structure claimed beyond the end of the file is
/// an error.
pub fn parse_pe(bytes: &[u8]) -> Result<PeLayout, PeError> {
    let file_len = bytes.len() as u64;
    if bytes.len() >= 2 && bytes[..2] != DOS_MAGIC {
        return Err(PeError::NotPe("missing MZ magic"));
    }
    if bytes.len() < DOS_HEADER_SIZE {
        return Err(PeError::Truncated("DOS header"));
    }
    let e_lfanew = read_u32(bytes, E_LFANEW_OFFSET) as u64;
    if e_lfanew < DOS_HEADER_SIZE as u64 {
        return Err(PeError::NotPe("e_lfanew inside DOS header"));
    }
    if e_lfanew + 4 > file_len {
        return Err(PeError::Truncated("PE signature"));
    }
    let sig_off = e_lfanew as usize;
    if bytes[sig_off..sig_off + 4] != PE_SIGNATURE {
        return Err(PeError::NotPe("missing PE signature"));
    }

    let coff_off = sig_off + 4;
    if coff_off + COFF_HEADER_SIZE > bytes.len() {
        return Err(PeError::Truncated("COFF header"));
    }
    let number_of_sections = read_u16(bytes, coff_off + 2) as usize;
    let size_of_optional_header = read_u16(bytes, coff_off + 16) as usize;

    let opt_off = coff_off + COFF_HEADER_SIZE;
    let section_table_off = opt_off + size_of_optional_header;
    let section_table_end = section_table_off + number_of_sections * SECTION_HEADER_SIZE;
    if section_table_end > bytes.len() {
        return Err(PeError::Truncated("section table"));
    }

    let mut malformed = false;

    // SizeOfHeaders sits at offset 60 of the optional header in both
    // PE32 and PE32+.  When the optional header does not carry it, fall
    // back to the end of the section table.
    let size_of_headers = if size_of_optional_header >= 64 {
        if opt_off + 64 > bytes.len() {
            return Err(PeError::Truncated("optional header"));
        }
        read_u32(bytes, opt_off + 60) as u64
    } else {
        malformed = true;
        section_table_end as u64
    };

    let mut sections = Vec::with_capacity(number_of_sections);
    for i in 0..number_of_sections {
        let off = section_table_off + i * SECTION_HEADER_SIZE;
        let name = section_name(&bytes[off..off + 8]);
        let virtual_size = read_u32(bytes, off + 8) as u64;
        let size_raw = read_u32(bytes, off + 16) as u64;
        let ptr_raw = read_u32(bytes, off + 20) as u64;
        let characteristics = read_u32(bytes, off + 36);

        // Clamp the raw span to the file; lies here are routine in malware.
        let (ptr_raw, size_raw) = if ptr_raw > file_len {
            malformed = true;
            (file_len, 0)
        } else if ptr_raw + size_raw > file_len {
            malformed = true;
            (ptr_raw, file_len - ptr_raw)
        } else {
            (ptr_raw, size_raw)
        };

        sections.push(SectionEntry {
            name,
            ptr_raw,
            size_raw,
            virtual_size,
            characteristics,
            is_executable: characteristics & SCN_MEM_EXECUTE != 0,
        });
    }

    // Overlapping raw spans: flag, the region map resolves the contest.
    let mut spans: Vec<(u64, u64)> = sections
        .iter()
        .filter(|s| s.size_raw > 0)
        .map(|s| (s.ptr_raw, s.raw_end()))
        .collect();
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        malformed = true;
    }

    Ok(PeLayout {
        e_lfanew,
        size_of_headers,
        sections,
        file_len,
        malformed,
    })
}

/// Index of the first section carrying the executable characteristic.
pub fn code_section(layout: &PeLayout) -> Option<usize> {
    layout.sections.iter().position(|s| s.is_executable)
}

/// Remove `claimed` (sorted, disjoint) from `span`.
fn subtract(span: ByteInterval, claimed: &[ByteInterval]) -> Vec<ByteInterval> {
    let mut out = Vec::new();
    let mut cursor = span.start;
    for c in claimed {
        if c.end <= cursor {
            continue;
        }
        if c.start >= span.end {
            break;
        }
        if c.start > cursor {
            out.push(ByteInterval::new(cursor, c.start.min(span.end)));
        }
        cursor = cursor.max(c.end);
        if cursor >= span.end {
            break;
        }
    }
    if cursor < span.end {
        out.push(ByteInterval::new(cursor, span.end));
    }
    out
}

fn claim(claimed: &mut Vec<ByteInterval>, iv: ByteInterval) {
    if iv.is_empty() {
        return;
    }
    let pos = claimed.partition_point(|c| c.start < iv.start);
    claimed.insert(pos, iv);
}

/// Partition the file of a parsed layout into disjoint regions.
///
/// Contested bytes go to the earlier claimant, in the fixed priority
/// order DOS area, PE headers, then sections in table order.  The
/// overlay starts where the last raw section span ends, never before
/// the declared header area, and runs to the end of the file.  Slack is
/// everything before the overlay that no other region claimed.
pub fn region_map(layout: &PeLayout) -> RegionMap {
    let file_len = layout.file_len;
    let dos_end = layout.e_lfanew.min(file_len);
    let dos = ByteInterval::new(0, dos_end);

    let hdr_end = layout.size_of_headers.clamp(dos_end, file_len);
    let pe_headers = ByteInterval::new(dos_end, hdr_end);

    let mut claimed: Vec<ByteInterval> = Vec::new();
    claim(&mut claimed, dos);
    claim(&mut claimed, pe_headers);

    let mut content = Vec::with_capacity(layout.sections.len());
    for s in &layout.sections {
        let content_len = if s.virtual_size == 0 {
            s.size_raw
        } else {
            s.virtual_size.min(s.size_raw)
        };
        let span = ByteInterval::new(s.ptr_raw, s.ptr_raw + content_len);
        let pieces = subtract(span, &claimed);
        for &p in &pieces {
            claim(&mut claimed, p);
        }
        content.push(pieces);
    }

    let sections_end = layout
        .sections
        .iter()
        .map(SectionEntry::raw_end)
        .max()
        .unwrap_or(0);
    let overlay_start = sections_end
        .max(layout.size_of_headers)
        .max(layout.e_lfanew)
        .min(file_len);
    let overlay_iv = ByteInterval::new(overlay_start, file_len);

    let slack = subtract(ByteInterval::new(0, overlay_start), &claimed);

    let keep = |iv: ByteInterval| if iv.is_empty() { vec![] } else { vec![iv] };
    RegionMap {
        dos: keep(dos),
        pe_headers: keep(pe_headers),
        content,
        slack,
        overlay: keep(overlay_iv),
        code_section_index: code_section(layout),
        file_len,
    }
}

/// Gather the attribution values that fall inside one region kind.
///
/// `values` is the windowed attribution vector; its length is the
/// cutoff (`min(file_len, window)`), so intervals are intersected with
/// `[0, values.len())`.  Values keep their byte-offset order.  An empty
/// selection is a value, not an error.
pub fn select(values: &[f64], map: &RegionMap, kind: RegionKind) -> Vec<f64> {
    let cutoff = values.len() as u64;
    let mut out = Vec::new();
    for iv in map.intervals(kind) {
        let start = iv.start.min(cutoff) as usize;
        let end = iv.end.min(cutoff) as usize;
        out.extend_from_slice(&values[start..end]);
    }
    out
}

/// One labeled interval of the `map` subcommand's JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct RegionRecord {
    pub kind: &'static str,
    pub start: u64,
    pub end: u64,
}

/// JSON shape of the `map` subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct RegionMapReport {
    pub file_len: u64,
    pub malformed: bool,
    pub regions: Vec<RegionRecord>,
    pub code_section: Option<usize>,
}

/// Flatten a layout and its region map into the `map` report shape.
pub fn map_report(layout: &PeLayout, map: &RegionMap) -> RegionMapReport {
    let regions = map
        .labeled_intervals()
        .into_iter()
        .map(|(kind, iv)| RegionRecord {
            kind: kind.label(),
            start: iv.start,
            end: iv.end,
        })
        .collect();
    RegionMapReport {
        file_len: map.file_len,
        malformed: layout.malformed,
        regions,
        code_section: map.code_section_index,
    }
}
