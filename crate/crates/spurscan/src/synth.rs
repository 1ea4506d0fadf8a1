//! Synthetic PE corpora with planted byte-pattern correlations, plus a
//! toy trainer.
//!
//! Real pretrained detectors can't be shipped with this artifact, so
//! the end-to-end claim is made verifiable by construction: generate
//! files whose only label signal is a marker planted in a chosen
//! region, train a small model until it keys on the marker, and check
//! that the attribution pipeline points at that region.

use crate::corpus::ClassLabel;
use crate::nn::{
    backward_params_seeded, forward_bytes, ModelConfig, NnError, OutputHead, WeightStore,
};
use crate::pe_map::{parse_pe, region_map, ByteInterval, RegionKind, RegionMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("inconsistent fixture spec: {0}")]
    InconsistentSpec(String),
    #[error("training diverged: non-finite loss in epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How the non-structural bytes of a region are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Zeros,
    Uniform,
}

/// Per-region fill policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionFill {
    pub dos: Fill,
    pub headers: Fill,
    pub content: Fill,
    pub slack: Fill,
    pub overlay: Fill,
}

impl RegionFill {
    pub const ZEROS: Self = Self {
        dos: Fill::Zeros,
        headers: Fill::Zeros,
        content: Fill::Zeros,
        slack: Fill::Zeros,
        overlay: Fill::Zeros,
    };
    pub const UNIFORM: Self = Self {
        dos: Fill::Uniform,
        headers: Fill::Uniform,
        content: Fill::Uniform,
        slack: Fill::Uniform,
        overlay: Fill::Uniform,
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpec {
    /// At most 8 bytes.
    pub name: String,
    pub ptr_raw: u32,
    pub size_raw: u32,
    pub virtual_size: u32,
    pub executable: bool,
}

/// Blueprint for a synthetic PE whose region map is known in advance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub e_lfanew: u32,
    pub size_of_headers: u32,
    /// Sorted by `ptr_raw`, raw spans disjoint, all at or past
    /// `size_of_headers`.
    pub sections: Vec<SectionSpec>,
    pub overlay_len: u32,
    pub fill: RegionFill,
}

/// The fixture the documentation examples use: one executable `.text`
/// section, a slack gap behind it, and a 0x100-byte overlay — total
/// file length 0x500.
pub fn example_spec() -> FixtureSpec {
    FixtureSpec {
        e_lfanew: 0x80,
        size_of_headers: 0x200,
        sections: vec![SectionSpec {
            name: ".text".into(),
            ptr_raw: 0x200,
            size_raw: 0x200,
            virtual_size: 0x180,
            executable: true,
        }],
        overlay_len: 0x100,
        fill: RegionFill::ZEROS,
    }
}

const OPT_HEADER_SIZE: u32 = 0xF0; // PE32+ with standard data directories
const SECTION_ENTRY: u32 = 40;
const MAX_FIXTURE_LEN: u64 = 256 << 20;

struct IntendedLayout {
    file_len: u64,
    overlay_start: u64,
}

fn intended_layout(spec: &FixtureSpec) -> Result<IntendedLayout, SynthError> {
    let fail = |msg: String| Err(SynthError::InconsistentSpec(msg));
    if spec.e_lfanew < 0x40 {
        return fail(format!(
            "e_lfanew {:#x} overlaps the DOS header",
            spec.e_lfanew
        ));
    }
    let n = spec.sections.len() as u64;
    let table_end =
        spec.e_lfanew as u64 + 24 + OPT_HEADER_SIZE as u64 + SECTION_ENTRY as u64 * n;
    if (spec.size_of_headers as u64) < table_end {
        return fail(format!(
            "size_of_headers {:#x} clips the section table (ends {table_end:#x})",
            spec.size_of_headers
        ));
    }
    let mut cursor = spec.size_of_headers as u64;
    for s in &spec.sections {
        if s.name.len() > 8 {
            return fail(format!("section name {:?} over 8 bytes", s.name));
        }
        if (s.ptr_raw as u64) < cursor {
            return fail(format!(
                "section {:?} raw span starts at {:#x}, inside headers or an earlier section",
                s.name, s.ptr_raw
            ));
        }
        cursor = s.ptr_raw as u64 + s.size_raw as u64;
    }
    let overlay_start = cursor.max(spec.size_of_headers as u64);
    let file_len = overlay_start + spec.overlay_len as u64;
    if file_len > MAX_FIXTURE_LEN {
        return fail(format!("fixture length {file_len:#x} is unreasonable"));
    }
    Ok(IntendedLayout {
        file_len,
        overlay_start,
    })
}

/// Build the synthetic PE.  The produced bytes always parse, and their
/// region map reproduces the spec's intervals exactly.
pub fn make_fixture(spec: &FixtureSpec, seed: u64) -> Result<Vec<u8>, SynthError> {
    let layout = intended_layout(spec)?;
    let mut b = vec![0u8; layout.file_len as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Fills first; structural bytes below overwrite where they must.
    let mut fill = |iv: ByteInterval, policy: Fill, rng: &mut ChaCha8Rng| {
        if policy == Fill::Uniform {
            rng.fill(&mut b[iv.start as usize..iv.end as usize]);
        }
    };
    fill(
        ByteInterval::new(0, spec.e_lfanew as u64),
        spec.fill.dos,
        &mut rng,
    );
    fill(
        ByteInterval::new(spec.e_lfanew as u64, spec.size_of_headers as u64),
        spec.fill.headers,
        &mut rng,
    );
    let mut cursor = spec.size_of_headers as u64;
    for s in &spec.sections {
        let (start, end) = (s.ptr_raw as u64, s.ptr_raw as u64 + s.size_raw as u64);
        if start > cursor {
            fill(ByteInterval::new(cursor, start), spec.fill.slack, &mut rng);
        }
        // A raw span cut short by virtual_size ends in slack padding.
        let content_len = if s.virtual_size == 0 {
            s.size_raw as u64
        } else {
            (s.virtual_size as u64).min(s.size_raw as u64)
        };
        fill(
            ByteInterval::new(start, start + content_len),
            spec.fill.content,
            &mut rng,
        );
        fill(
            ByteInterval::new(start + content_len, end),
            spec.fill.slack,
            &mut rng,
        );
        cursor = end;
    }
    if layout.overlay_start > cursor {
        fill(
            ByteInterval::new(cursor, layout.overlay_start),
            spec.fill.slack,
            &mut rng,
        );
    }
    fill(
        ByteInterval::new(layout.overlay_start, layout.file_len),
        spec.fill.overlay,
        &mut rng,
    );

    // DOS header.
    b[0] = b'M';
    b[1] = b'Z';
    b[0x3C..0x40].copy_from_slice(&spec.e_lfanew.to_le_bytes());
    // PE signature + COFF header.
    let e = spec.e_lfanew as usize;
    b[e..e + 4].copy_from_slice(b"PE\0\0");
    b[e + 4..e + 6].copy_from_slice(&0x8664u16.to_le_bytes()); // machine
    b[e + 6..e + 8].copy_from_slice(&(spec.sections.len() as u16).to_le_bytes());
    b[e + 20..e + 22].copy_from_slice(&(OPT_HEADER_SIZE as u16).to_le_bytes());
    b[e + 22..e + 24].copy_from_slice(&0x0002u16.to_le_bytes()); // executable image
    // Optional header (PE32+): magic and SizeOfHeaders.
    let opt = e + 24;
    b[opt..opt + 2].copy_from_slice(&0x20Bu16.to_le_bytes());
    b[opt + 60..opt + 64].copy_from_slice(&spec.size_of_headers.to_le_bytes());
    // Section table.
    for (i, s) in spec.sections.iter().enumerate() {
        let at = opt + OPT_HEADER_SIZE as usize + i * SECTION_ENTRY as usize;
        b[at..at + s.name.len()].copy_from_slice(s.name.as_bytes());
        b[at + 8..at + 12].copy_from_slice(&s.virtual_size.to_le_bytes());
        b[at + 16..at + 20].copy_from_slice(&s.size_raw.to_le_bytes());
        b[at + 20..at + 24].copy_from_slice(&s.ptr_raw.to_le_bytes());
        let chars: u32 = if s.executable {
            0x6000_0020 // code | execute | read
        } else {
            0xC000_0040 // initialized data | read | write
        };
        b[at + 36..at + 40].copy_from_slice(&chars.to_le_bytes());
    }

    debug_assert!(parse_pe(&b).is_ok());
    Ok(b)
}

/// 16 bytes, long enough to span several toy-scale conv receptive
/// fields.
pub const DEFAULT_MARKER: [u8; 16] = [
    0xDE, 0xAD, 0xBE, 0xEF, 0xFE, 0xED, 0xFA, 0xCE, 0x0B, 0xAD, 0xF0, 0x0D, 0xCA, 0xFE,
    0xBA, 0xBE,
];

/// A byte pattern planted so that its presence correlates with one
/// class at strength `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub region: RegionKind,
    pub marker: Vec<u8>,
    pub class: ClassLabel,
    /// Marker probability for the correlated class; the other class
    /// gets it with probability `1 − p`.  `0.5` ≤ p ≤ `1`.
    pub p: f64,
}

impl PlantSpec {
    pub fn new(region: RegionKind, class: ClassLabel, p: f64) -> Self {
        Self {
            region,
            marker: DEFAULT_MARKER.to_vec(),
            class,
            p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFile {
    pub name: String,
    pub label: ClassLabel,
    pub bytes: Vec<u8>,
    pub planted: bool,
}

/// Where the marker goes: the start of the region's first interval,
/// except in the DOS region where the first two bytes are the `MZ`
/// magic and `[0x3C, 0x40)` holds the header offset.
fn plant_interval(map: &RegionMap, region: RegionKind) -> Option<ByteInterval> {
    let first = *map.intervals(region).first()?;
    match region {
        RegionKind::Dos => Some(ByteInterval::new(2, first.end.min(0x3C))),
        _ => Some(first),
    }
}

/// Generate a balanced labeled corpus of `n_per_class` files per class
/// from one fixture template.  All region bytes are i.i.d. uniform;
/// the only label signal is the planted marker.
pub fn gen_dataset(
    n_per_class: usize,
    template: &FixtureSpec,
    plant: &PlantSpec,
    seed: u64,
) -> Result<Vec<SynthFile>, SynthError> {
    if n_per_class == 0 {
        return Err(SynthError::InconsistentSpec(
            "need at least one file per class".into(),
        ));
    }
    if !(0.5..=1.0).contains(&plant.p) {
        return Err(SynthError::InconsistentSpec(format!(
            "correlation strength {} outside [0.5, 1]",
            plant.p
        )));
    }
    let mut template = template.clone();
    template.fill = RegionFill::UNIFORM;

    // The template fixes the region map, so validate marker fit once.
    let probe = make_fixture(&template, 0)?;
    let map = region_map(&parse_pe(&probe).expect("fixture parses"));
    let slot = plant_interval(&map, plant.region).ok_or_else(|| {
        SynthError::InconsistentSpec(format!(
            "template has no {} region to plant in",
            plant.region.label()
        ))
    })?;
    if (slot.len() as usize) < plant.marker.len() {
        return Err(SynthError::InconsistentSpec(format!(
            "marker ({} bytes) does not fit the {} region slot ({} bytes)",
            plant.marker.len(),
            plant.region.label(),
            slot.len()
        )));
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut files = Vec::with_capacity(2 * n_per_class);
    for label in [ClassLabel::Goodware, ClassLabel::Malware] {
        for i in 0..n_per_class {
            let file_seed: u64 = master.gen();
            let p_marker = if label == plant.class {
                plant.p
            } else {
                1.0 - plant.p
            };
            let planted = master.gen_bool(p_marker);
            let mut bytes = make_fixture(&template, file_seed)?;
            if planted {
                let at = slot.start as usize;
                bytes[at..at + plant.marker.len()].copy_from_slice(&plant.marker);
            }
            files.push(SynthFile {
                name: format!("{}_{i:04}.exe", label.name()),
                label,
                bytes,
                planted,
            });
        }
    }
    Ok(files)
}

/// Write a generated corpus in the `<dir>/{goodware,malware}/file`
/// layout that [`crate::corpus::scan_dir`] reads back.
pub fn write_dataset(files: &[SynthFile], dir: &std::path::Path) -> std::io::Result<()> {
    for label in [ClassLabel::Goodware, ClassLabel::Malware] {
        std::fs::create_dir_all(dir.join(label.name()))?;
    }
    for f in files {
        std::fs::write(dir.join(f.label.name()).join(&f.name), &f.bytes)?;
    }
    Ok(())
}

/// Outcome of [`train_toy`].
#[derive(Debug)]
pub struct TrainReport {
    pub store: WeightStore,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub epochs: usize,
}

const BATCH: usize = 16;

fn sample_loss_and_dlogits(
    output: OutputHead,
    outputs: &[f64],
    target: f64,
) -> (f64, Vec<f64>) {
    let eps = 1e-12;
    match output {
        OutputHead::Softmax2 => {
            let (p0, p1) = (outputs[0], outputs[1]);
            let p_true = if target > 0.5 { p1 } else { p0 };
            let loss = -(p_true.max(eps)).ln();
            (loss, vec![p0 - (1.0 - target), p1 - target])
        }
        OutputHead::Sigmoid1 => {
            let m = outputs[0];
            let loss = -(target * m.max(eps).ln() + (1.0 - target) * (1.0 - m).max(eps).ln());
            (loss, vec![m - target])
        }
    }
}

/// Mini-batch SGD (batch 16, no momentum) with cross-entropy loss.
/// Single-threaded and deterministic under a fixed seed.
pub fn train_toy(
    cfg: &ModelConfig,
    samples: &[(&[u8], ClassLabel)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainReport, SynthError> {
    if samples.is_empty() {
        return Err(SynthError::InconsistentSpec("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::random(cfg, rng.gen());
    let plan = cfg.tensor_plan();

    let diverged = |e: NnError, epoch: usize| match e {
        NnError::NonFinite(_) => SynthError::Diverged(epoch),
        other => SynthError::Nn(other),
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(BATCH) {
            let mut acc: Vec<Vec<f64>> = plan
                .iter()
                .map(|spec| vec![0.0; spec.shape.iter().product()])
                .collect();
            for &i in batch {
                let (bytes, label) = samples[i];
                let (pred, cache) =
                    forward_bytes(cfg, &store, bytes).map_err(|e| diverged(e, epoch))?;
                let (loss, d_logits) =
                    sample_loss_and_dlogits(cfg.output, &pred.outputs, label.target());
                epoch_loss += loss;
                let grads = backward_params_seeded(cfg, &store, &cache, &d_logits)
                    .map_err(|e| diverged(e, epoch))?;
                for (slot, (_, g)) in acc.iter_mut().zip(grads.entries()) {
                    for (a, &v) in slot.iter_mut().zip(g.data()) {
                        *a += v as f64;
                    }
                }
            }
            let scale = lr / batch.len() as f64;
            for (spec, slot) in plan.iter().zip(&acc) {
                let w = store.get_mut(&spec.name).expect("plan matches store");
                for (cell, &g) in w.data_mut().iter_mut().zip(slot) {
                    *cell -= (scale * g) as f32;
                }
            }
        }
        epoch_loss /= samples.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(SynthError::Diverged(epoch));
        }
    }

    let eval = evaluate(cfg, &store, samples)?;
    Ok(TrainReport {
        store,
        final_loss: eval.mean_loss,
        final_accuracy: eval.accuracy,
        epochs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n: usize,
}

/// Accuracy (malware score thresholded at 0.5) and mean loss of a
/// model over labeled samples.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &WeightStore,
    samples: &[(&[u8], ClassLabel)],
) -> Result<EvalReport, SynthError> {
    if samples.is_empty() {
        return Err(SynthError::InconsistentSpec("empty evaluation set".into()));
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for &(bytes, label) in samples {
        let (pred, _) = forward_bytes(cfg, store, bytes)?;
        let (loss, _) = sample_loss_and_dlogits(cfg.output, &pred.outputs, label.target());
        total_loss += loss;
        let said_malware = pred.malware_score > 0.5;
        if said_malware == (label == ClassLabel::Malware) {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        mean_loss: total_loss / samples.len() as f64,
        n: samples.len(),
    })
}
