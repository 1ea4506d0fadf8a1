//! Integrated gradients in embedding space against the padding
//! baseline.
//!
//! The attribution for input `x` is the elementwise product of
//! `E(x) − E(baseline)` with the mean input gradient along the straight
//! line between the two embeddings, collapsed to one signed value per
//! byte position.  The baseline is the "empty file": a full window of
//! padding tokens.

use crate::nn::{
    backward_input, embed, forward, window_tokens, ModelConfig, NnError, ScoreTarget, Tensor,
    WeightStore,
};
use serde::{Deserialize, Serialize};

/// Reference input the attribution is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// A window-length sequence of the padding token.
    PadFile,
}

/// Attribution settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgConfig {
    /// Interpolation points of the Riemann sum.
    pub steps: usize,
    pub baseline: Baseline,
    pub target: ScoreTarget,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            baseline: Baseline::PadFile,
            target: ScoreTarget::MalwareScore,
        }
    }
}

/// One signed attribution per windowed byte of the input file.
#[derive(Debug, Clone, Serialize)]
pub struct AttributionVector {
    /// Length `min(file_len, window)`.
    pub values: Vec<f64>,
    /// `|Σ values − (f(x) − f(baseline))|`; shrinks as steps grow.
    pub completeness_residual: f64,
    pub score_x: f64,
    pub score_baseline: f64,
}

/// [`AttributionVector`] plus the untruncated per-position values, for
/// callers that need to see the padded tail (always exactly zero
/// there).
#[derive(Debug, Clone)]
pub struct FullAttribution {
    pub attr: AttributionVector,
    /// Length `window`.
    pub window_values: Vec<f64>,
}

/// Integrated gradients of the configured score target.
pub fn integrated_gradients(
    cfg: &ModelConfig,
    store: &WeightStore,
    igc: &IgConfig,
    bytes: &[u8],
) -> Result<AttributionVector, NnError> {
    Ok(integrated_gradients_full(cfg, store, igc, bytes)?.attr)
}

/// Integrated gradients, also exposing the full-window value vector.
pub fn integrated_gradients_full(
    cfg: &ModelConfig,
    store: &WeightStore,
    igc: &IgConfig,
    bytes: &[u8],
) -> Result<FullAttribution, NnError> {
    if igc.steps == 0 {
        return Err(NnError::InvalidConfig(
            "integrated gradients needs at least one step".into(),
        ));
    }
    let Baseline::PadFile = igc.baseline;

    let tokens = window_tokens(bytes, cfg.window);
    let e_x = embed(cfg, store, &tokens)?;
    let e_b = embed(cfg, store, &[])?;
    let (pred_x, _) = forward(cfg, store, &e_x)?;
    let (pred_b, _) = forward(cfg, store, &e_b)?;

    let n = e_x.numel();
    let diff: Vec<f64> = (0..n)
        .map(|i| e_x.data()[i] as f64 - e_b.data()[i] as f64)
        .collect();

    // Right-endpoint Riemann sum over α = k/m, k = 1..m.
    let m = igc.steps;
    let mut g_sum = vec![0.0f64; n];
    let mut point = Tensor::zeros(vec![cfg.window, cfg.embed_dim]);
    for k in 1..=m {
        let alpha = k as f64 / m as f64;
        for (i, cell) in point.data_mut().iter_mut().enumerate() {
            *cell = (e_b.data()[i] as f64 + alpha * diff[i]) as f32;
        }
        let (_, cache) = forward(cfg, store, &point)?;
        let g = backward_input(cfg, store, &cache, igc.target, 1.0)?;
        for (acc, &v) in g_sum.iter_mut().zip(g.data()) {
            *acc += v as f64;
        }
    }

    let e_dim = cfg.embed_dim;
    let window_values: Vec<f64> = (0..cfg.window)
        .map(|p| {
            (0..e_dim)
                .map(|e| {
                    let i = p * e_dim + e;
                    diff[i] * (g_sum[i] / m as f64)
                })
                .sum()
        })
        .collect();
    if window_values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("attribution values"));
    }

    let score_x = pred_x.target_value(igc.target);
    let score_baseline = pred_b.target_value(igc.target);
    let total: f64 = window_values.iter().sum();
    let completeness_residual = (total - (score_x - score_baseline)).abs();

    let keep = bytes.len().min(cfg.window);
    let attr = AttributionVector {
        values: window_values[..keep].to_vec(),
        completeness_residual,
        score_x,
        score_baseline,
    };
    Ok(FullAttribution {
        attr,
        window_values,
    })
}

/// IG's completeness axiom as a quality gate: the residual must be
/// small relative to the score gap the attributions are meant to
/// explain.
pub fn completeness_check(attr: &AttributionVector, rel_tol: f64) -> bool {
    attr.completeness_residual <= rel_tol * (attr.score_x - attr.score_baseline).abs().max(1e-6)
}
