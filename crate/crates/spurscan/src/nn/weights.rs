//! Named weight tensors and the portable on-disk weight format.
//!
//! File layout, bit-exact:
//!
//! ```text
//! bytes 0..8    magic "SPURW001"
//! bytes 8..12   little-endian u32 manifest length L
//! bytes 12..12+L UTF-8 JSON manifest
//! rest          payload: little-endian f32 values at the offsets the
//!               manifest declares (relative to payload start)
//! ```
//!
//! The manifest is `{"arch": str, "config": {...}, "tensors":
//! [{"name", "shape", "offset"}, ...]}` and must agree exactly with the
//! tensor plan the config implies.

use super::config::{ModelConfig, TensorSpec};
use super::tensor::Tensor;
use super::NnError;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

pub const WEIGHT_MAGIC: &[u8; 8] = b"SPURW001";

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Ordered map from tensor name to tensor.
///
/// Carries a generation stamp that changes on every mutation, so a
/// [`super::ForwardCache`] built against older weights is detected as
/// stale.
#[derive(Debug, Clone)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
    generation: u64,
}

impl WeightStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, NnError> {
        for i in 1..entries.len() {
            if entries[..i].iter().any(|(n, _)| *n == entries[i].0) {
                return Err(NnError::ManifestMismatch(format!(
                    "duplicate tensor name {}",
                    entries[i].0
                )));
            }
        }
        Ok(Self {
            entries,
            generation: fresh_generation(),
        })
    }

    /// Zero weights matching the config's tensor plan.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let entries = cfg
            .tensor_plan()
            .into_iter()
            .map(|spec| (spec.name, Tensor::zeros(spec.shape)))
            .collect();
        Self {
            entries,
            generation: fresh_generation(),
        }
    }

    /// Seeded uniform init: embeddings and biases small, conv and fc
    /// weights scaled by fan-in.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = cfg
            .tensor_plan()
            .into_iter()
            .map(|spec| {
                let bound = if spec.name == "embedding" {
                    0.5
                } else if spec.name.ends_with(".bias") {
                    0.1
                } else {
                    // fan-in = everything but the leading output dim
                    let fan_in: usize = spec.shape[1..].iter().product();
                    (6.0 / fan_in.max(1) as f32).sqrt()
                };
                let dist = Uniform::new_inclusive(-bound, bound);
                let data = (0..spec.shape.iter().product::<usize>())
                    .map(|_| dist.sample(&mut rng))
                    .collect();
                (spec.name.clone(), Tensor::new(spec.shape, data).unwrap())
            })
            .collect();
        Self {
            entries,
            generation: fresh_generation(),
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Mutable tensor access; invalidates existing forward caches.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.generation = fresh_generation();
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Check names and shapes against the config's tensor plan.
    pub fn matches_plan(&self, cfg: &ModelConfig) -> Result<(), NnError> {
        let plan = cfg.tensor_plan();
        check_plan(
            &plan,
            self.entries
                .iter()
                .map(|(n, t)| (n.as_str(), t.shape().to_vec())),
            self.entries.len(),
        )
    }
}

fn check_plan<'a, I>(plan: &[TensorSpec], actual: I, actual_len: usize) -> Result<(), NnError>
where
    I: Iterator<Item = (&'a str, Vec<usize>)>,
{
    if plan.len() != actual_len {
        return Err(NnError::ManifestMismatch(format!(
            "expected {} tensors, found {actual_len}",
            plan.len()
        )));
    }
    for (spec, (name, shape)) in plan.iter().zip(actual) {
        if spec.name != name {
            return Err(NnError::ManifestMismatch(format!(
                "expected tensor {} at this position, found {name}",
                spec.name
            )));
        }
        if spec.shape != shape {
            return Err(NnError::ManifestMismatch(format!(
                "tensor {name}: expected shape {:?}, found {shape:?}",
                spec.shape
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arch: String,
    config: ModelConfig,
    tensors: Vec<ManifestTensor>,
}

/// Serialize config and weights into the weight file format.
pub fn save_weights(cfg: &ModelConfig, store: &WeightStore) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.entries() {
        tensors.push(ManifestTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let manifest = Manifest {
        arch: cfg.arch.name().to_string(),
        config: cfg.clone(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(12 + manifest_json.len() + offset as usize);
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for (_, t) in store.entries() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse and validate a weight file.
pub fn load_weights(bytes: &[u8]) -> Result<(ModelConfig, WeightStore), NnError> {
    if bytes.len() < 8 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(NnError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(NnError::TruncatedPayload("missing manifest length".into()));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + manifest_len;
    if payload_start > bytes.len() {
        return Err(NnError::TruncatedPayload("manifest cut short".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| NnError::ManifestMismatch(format!("manifest not valid JSON: {e}")))?;

    let cfg = manifest.config;
    cfg.validate()?;
    if manifest.arch != cfg.arch.name() {
        return Err(NnError::ManifestMismatch(format!(
            "arch field {} disagrees with config arch {}",
            manifest.arch,
            cfg.arch.name()
        )));
    }
    let plan = cfg.tensor_plan();
    check_plan(
        &plan,
        manifest
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.clone())),
        manifest.tensors.len(),
    )?;

    let payload = &bytes[payload_start..];
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(NnError::TruncatedPayload(format!(
                "tensor {} wants payload bytes {start}..{end}, have {}",
                t.name,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("weight payload"));
        }
        entries.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
    }
    Ok((cfg, WeightStore::new(entries)?))
}
