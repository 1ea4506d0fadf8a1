//! Finite-difference validation of the analytic gradients.
//!
//! Central differences with step `1e-3` against the 64-bit score; a
//! cell passes when the relative error is at most `5e-3`.  Two kinds of
//! cell are skipped as degenerate: those whose analytic gradient is at
//! or below `1e-6` in magnitude (the difference quotient is dominated
//! by noise there), and those where a ±step probe lands on a different
//! piecewise-linear branch (a max-pool winner or ReLU sign changed —
//! the score has a kink inside the probe interval, so the central
//! difference measures a mix of two slopes, not a derivative).

use super::config::ModelConfig;
use super::model::{backward_input, backward_params, embed, forward, forward_bytes, window_tokens, ScoreTarget};
use super::weights::WeightStore;
use super::NnError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const STEP: f64 = 1e-3;
const DEGENERATE: f64 = 1e-6;
const CELLS_PER_KIND: usize = 200;

/// Outcome of one finite-difference run.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub arch: String,
    pub seed: u64,
    pub input_cells_checked: usize,
    pub param_cells_checked: usize,
    /// Candidates discarded because a probe crossed a kink.
    pub input_cells_skipped: usize,
    pub param_cells_skipped: usize,
    pub max_input_rel_err: f64,
    pub max_param_rel_err: f64,
}

impl GradCheckReport {
    /// The acceptance threshold for both gradient kinds.
    pub const TOLERANCE: f64 = 5e-3;

    pub fn passed(&self) -> bool {
        self.max_input_rel_err <= Self::TOLERANCE && self.max_param_rel_err <= Self::TOLERANCE
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - fd).abs() / denom
    }
}

/// Compare analytic input and parameter gradients of a small model
/// against central finite differences on up to 200 non-degenerate
/// cells each.
pub fn gradcheck(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport, NnError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = WeightStore::random(cfg, rng.gen());
    // A full window of random bytes.  A padded tail would repeat one
    // embedding row, making pooled conv values tie exactly; the score
    // is not differentiable at such ties, so finite differences there
    // measure a mix of the two branches.
    let bytes: Vec<u8> = (0..cfg.window).map(|_| rng.gen()).collect();
    let target = ScoreTarget::MalwareScore;

    // ---- input gradient ----
    let tokens = window_tokens(&bytes, cfg.window);
    let emb = embed(cfg, &store, &tokens)?;
    let (_, base_cache) = forward(cfg, &store, &emb)?;
    let analytic_in = backward_input(cfg, &store, &base_cache, target, 1.0)?;
    let mut cells: Vec<usize> = (0..analytic_in.numel())
        .filter(|&i| (analytic_in.data()[i] as f64).abs() > DEGENERATE)
        .collect();
    cells.shuffle(&mut rng);

    let mut max_input_rel_err = 0.0f64;
    let mut input_cells_checked = 0usize;
    let mut input_cells_skipped = 0usize;
    for &i in &cells {
        if input_cells_checked == CELLS_PER_KIND {
            break;
        }
        let orig = emb.data()[i];
        let xp = (orig as f64 + STEP) as f32;
        let xm = (orig as f64 - STEP) as f32;
        let mut probe = emb.clone();
        probe.data_mut()[i] = xp;
        let (pred_p, cache_p) = forward(cfg, &store, &probe)?;
        probe.data_mut()[i] = xm;
        let (pred_m, cache_m) = forward(cfg, &store, &probe)?;
        if !cache_p.same_branch(&base_cache) || !cache_m.same_branch(&base_cache) {
            input_cells_skipped += 1;
            continue;
        }
        let fd = (pred_p.target_value(target) - pred_m.target_value(target))
            / (xp as f64 - xm as f64);
        max_input_rel_err = max_input_rel_err.max(rel_err(analytic_in.data()[i] as f64, fd));
        input_cells_checked += 1;
    }

    // ---- parameter gradients ----
    let (_, base_cache) = forward_bytes(cfg, &store, &bytes)?;
    let analytic_par = backward_params(cfg, &store, &base_cache, target, 1.0)?;
    let mut param_cells: Vec<(String, usize)> = Vec::new();
    for (name, tensor) in analytic_par.entries() {
        for (i, &g) in tensor.data().iter().enumerate() {
            if (g as f64).abs() > DEGENERATE {
                param_cells.push((name.to_string(), i));
            }
        }
    }
    param_cells.shuffle(&mut rng);

    let mut max_param_rel_err = 0.0f64;
    let mut param_cells_checked = 0usize;
    let mut param_cells_skipped = 0usize;
    for (name, i) in &param_cells {
        if param_cells_checked == CELLS_PER_KIND {
            break;
        }
        let orig = store.get(name).unwrap().data()[*i];
        let xp = (orig as f64 + STEP) as f32;
        let xm = (orig as f64 - STEP) as f32;
        let mut probe = store.clone();
        probe.get_mut(name).unwrap().data_mut()[*i] = xp;
        let (pred_p, cache_p) = forward_bytes(cfg, &probe, &bytes)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = xm;
        let (pred_m, cache_m) = forward_bytes(cfg, &probe, &bytes)?;
        if !cache_p.same_branch(&base_cache) || !cache_m.same_branch(&base_cache) {
            param_cells_skipped += 1;
            continue;
        }
        let fd = (pred_p.target_value(target) - pred_m.target_value(target))
            / (xp as f64 - xm as f64);
        let analytic = analytic_par.get(name).unwrap().data()[*i] as f64;
        max_param_rel_err = max_param_rel_err.max(rel_err(analytic, fd));
        param_cells_checked += 1;
    }

    Ok(GradCheckReport {
        arch: cfg.arch.name().to_string(),
        seed,
        input_cells_checked,
        param_cells_checked,
        input_cells_skipped,
        param_cells_skipped,
        max_input_rel_err,
        max_param_rel_err,
    })
}
