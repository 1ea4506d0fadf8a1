//! Forward and backward passes for both detector architectures.
//!
//! Weights and cached activations are 32-bit.  Working values inside a
//! single forward or backward call are 64-bit so that the returned
//! score is smooth enough for finite-difference checks; this is the
//! "accumulate in 64-bit inside reductions" rule applied consistently.
//!
//! Layout conventions: embedded input and every intermediate sequence
//! are row-major `[position][channel]`; conv kernels are
//! `[out_channel][in_channel][tap]`.

use super::config::{Arch, ConvBlock, LayerPlan, ModelConfig, OutputHead};
use super::tensor::Tensor;
use super::weights::WeightStore;
use super::NnError;
use serde::{Deserialize, Serialize};

/// Token reserved for positions past the end of the file.
pub const PAD_TOKEN: u16 = 256;

/// First `window` bytes as tokens, padded with [`PAD_TOKEN`].
pub fn window_tokens(bytes: &[u8], window: usize) -> Vec<u16> {
    let mut tokens: Vec<u16> = bytes.iter().take(window).map(|&b| b as u16).collect();
    tokens.resize(window, PAD_TOKEN);
    tokens
}

/// Which scalar the input gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    /// Post-activation malware probability (softmax component 1 or the
    /// sigmoid output).
    MalwareScore,
    /// Pre-activation logit of the malware class.
    MalwareLogit,
}

/// Model outputs for one window.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Post-activation outputs: softmax probabilities or `[sigmoid]`.
    pub outputs: Vec<f64>,
    /// Pre-activation logits, same length as `outputs`.
    pub logits: Vec<f64>,
    /// Malware probability in `[0,1]`.
    pub malware_score: f64,
    /// Pre-activation logit of the malware class.
    pub malware_logit: f64,
}

impl Prediction {
    pub fn target_value(&self, target: ScoreTarget) -> f64 {
        match target {
            ScoreTarget::MalwareScore => self.malware_score,
            ScoreTarget::MalwareLogit => self.malware_logit,
        }
    }
}

/// Activations and argmax indices needed to run a backward pass.
///
/// Valid only for the exact (weights, input) pair it came from; any
/// weight mutation invalidates it (checked via the store generation).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    arch: Arch,
    tokens: Option<Vec<u16>>,
    emb: Vec<f32>,
    outputs: Vec<f64>,
    logits: Vec<f64>,
    detail: CacheDetail,
}

#[derive(Debug, Clone)]
enum CacheDetail {
    Gated {
        /// Per channel: winning conv position of the global max-pool.
        argmax: Vec<usize>,
        /// Pre-gate conv values at the winning position.
        pre_a: Vec<f64>,
        pre_b: Vec<f64>,
        /// Gated value at the winning position (head input).
        pooled: Vec<f64>,
    },
    ConvPool {
        /// Per block: pre-ReLU conv outputs, `[t][channel]`.
        pre_acts: Vec<Vec<f32>>,
        /// Per block: winning conv position per pooled cell, `[tp][channel]`.
        pool_argmax: Vec<Vec<usize>>,
        /// Winning final-stage position per channel.
        global_argmax: Vec<usize>,
        /// Head input per channel.
        pooled: Vec<f64>,
    },
}

impl ForwardCache {
    /// Token sequence, present only when the cache came from
    /// [`forward_bytes`].
    pub fn tokens(&self) -> Option<&[u16]> {
        self.tokens.as_deref()
    }

    /// Winning position per channel of the last (global) max-pool.
    pub fn global_argmax(&self) -> &[usize] {
        match &self.detail {
            CacheDetail::Gated { argmax, .. } => argmax,
            CacheDetail::ConvPool { global_argmax, .. } => global_argmax,
        }
    }

    pub fn prediction(&self) -> Prediction {
        prediction_from(&self.logits, &self.outputs)
    }

    /// True when both forwards took the same piecewise-linear branch:
    /// every max-pool picked the same winner and every pre-activation
    /// kept its sign.  Between such branches the score is smooth, which
    /// is what a finite-difference probe needs.
    pub(crate) fn same_branch(&self, other: &ForwardCache) -> bool {
        match (&self.detail, &other.detail) {
            (CacheDetail::Gated { argmax: a, .. }, CacheDetail::Gated { argmax: b, .. }) => a == b,
            (
                CacheDetail::ConvPool {
                    pre_acts: pa,
                    pool_argmax: qa,
                    global_argmax: ga,
                    ..
                },
                CacheDetail::ConvPool {
                    pre_acts: pb,
                    pool_argmax: qb,
                    global_argmax: gb,
                    ..
                },
            ) => {
                ga == gb
                    && qa == qb
                    && pa.iter().zip(pb).all(|(x, y)| {
                        x.iter().zip(y).all(|(u, v)| (*u > 0.0) == (*v > 0.0))
                    })
            }
            _ => false,
        }
    }
}

fn prediction_from(logits: &[f64], outputs: &[f64]) -> Prediction {
    let (malware_score, malware_logit) = if outputs.len() == 2 {
        (outputs[1], logits[1])
    } else {
        (outputs[0], logits[0])
    };
    Prediction {
        outputs: outputs.to_vec(),
        logits: logits.to_vec(),
        malware_score,
        malware_logit,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Reorder a `[C][Cin][K]` kernel into `[C][K][Cin]` f64 so the inner
/// products run over contiguous memory on both sides.
fn transposed_kernel(w: &Tensor) -> Vec<f64> {
    let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let data = w.data();
    let mut out = vec![0.0f64; c_out * c_in * k];
    for c in 0..c_out {
        for ci in 0..c_in {
            for kk in 0..k {
                out[c * (k * c_in) + kk * c_in + ci] = data[c * (c_in * k) + ci * k + kk] as f64;
            }
        }
    }
    out
}

/// Look up embedding rows for a token sequence, truncating or padding
/// to exactly `cfg.window` positions.
pub fn embed(cfg: &ModelConfig, store: &WeightStore, tokens: &[u16]) -> Result<Tensor, NnError> {
    let table = store
        .get("embedding")
        .ok_or_else(|| NnError::ManifestMismatch("weight store has no embedding table".into()))?;
    if table.shape() != [cfg.vocab, cfg.embed_dim] {
        return Err(NnError::ShapeMismatch(format!(
            "embedding table {:?}, config wants [{}, {}]",
            table.shape(),
            cfg.vocab,
            cfg.embed_dim
        )));
    }
    let e = cfg.embed_dim;
    let mut data = vec![0.0f32; cfg.window * e];
    for p in 0..cfg.window {
        let tok = if p < tokens.len() { tokens[p] } else { PAD_TOKEN };
        if tok as usize >= cfg.vocab {
            return Err(NnError::TokenOutOfRange {
                token: tok,
                vocab: cfg.vocab,
            });
        }
        data[p * e..(p + 1) * e].copy_from_slice(&table.data()[tok as usize * e..][..e]);
    }
    Tensor::new(vec![cfg.window, e], data)
}

/// Run the network on an embedded input.
pub fn forward(
    cfg: &ModelConfig,
    store: &WeightStore,
    emb: &Tensor,
) -> Result<(Prediction, ForwardCache), NnError> {
    cfg.validate()?;
    store.matches_plan(cfg)?;
    if emb.shape() != [cfg.window, cfg.embed_dim] {
        return Err(NnError::ShapeMismatch(format!(
            "embedded input {:?}, config wants [{}, {}]",
            emb.shape(),
            cfg.window,
            cfg.embed_dim
        )));
    }
    if !emb.is_finite() {
        return Err(NnError::NonFinite("embedded input"));
    }
    let emb64: Vec<f64> = emb.data().iter().map(|&v| v as f64).collect();

    let detail = match &cfg.layers {
        LayerPlan::Gated {
            channels: _,
            kernel,
            stride,
        } => {
            let t_out = cfg.stage_lengths()?[1];
            gated_forward(&emb64, cfg.embed_dim, store, *kernel, *stride, t_out)
        }
        LayerPlan::ConvPool { blocks } => conv_pool_forward(&emb64, cfg.embed_dim, blocks, store),
    };
    let pooled = match &detail {
        CacheDetail::Gated { pooled, .. } => pooled,
        CacheDetail::ConvPool { pooled, .. } => pooled,
    };
    let (logits, outputs) = head_forward(cfg, store, pooled)?;
    let pred = prediction_from(&logits, &outputs);
    let cache = ForwardCache {
        generation: store.generation(),
        arch: cfg.arch,
        tokens: None,
        emb: emb.data().to_vec(),
        outputs,
        logits,
        detail,
    };
    Ok((pred, cache))
}

/// Tokenize, embed and run the network on raw file bytes.  The cache
/// additionally carries the token sequence, enabling embedding-table
/// gradients in [`backward_params`].
pub fn forward_bytes(
    cfg: &ModelConfig,
    store: &WeightStore,
    bytes: &[u8],
) -> Result<(Prediction, ForwardCache), NnError> {
    let tokens = window_tokens(bytes, cfg.window);
    let emb = embed(cfg, store, &tokens)?;
    let (pred, mut cache) = forward(cfg, store, &emb)?;
    cache.tokens = Some(tokens);
    Ok((pred, cache))
}

fn gated_forward(
    emb64: &[f64],
    e_dim: usize,
    store: &WeightStore,
    kernel: usize,
    stride: usize,
    t_out: usize,
) -> CacheDetail {
    let wa = store.get("conv_a.weight").unwrap();
    let ba = store.get("conv_a.bias").unwrap();
    let wb = store.get("conv_b.weight").unwrap();
    let bb = store.get("conv_b.bias").unwrap();
    let channels = wa.shape()[0];
    let wat = transposed_kernel(wa);
    let wbt = transposed_kernel(wb);
    let span = kernel * e_dim;

    let mut argmax = vec![0usize; channels];
    let mut pre_a = vec![0.0f64; channels];
    let mut pre_b = vec![0.0f64; channels];
    let mut pooled = vec![0.0f64; channels];
    for c in 0..channels {
        let wa_c = &wat[c * span..(c + 1) * span];
        let wb_c = &wbt[c * span..(c + 1) * span];
        let mut best = f64::NEG_INFINITY;
        let (mut best_t, mut best_a, mut best_b) = (0usize, 0.0f64, 0.0f64);
        for t in 0..t_out {
            let win = &emb64[t * stride * e_dim..t * stride * e_dim + span];
            let a = ba.data()[c] as f64 + dot(win, wa_c);
            let b = bb.data()[c] as f64 + dot(win, wb_c);
            let g = a * sigmoid(b);
            if g > best {
                best = g;
                best_t = t;
                best_a = a;
                best_b = b;
            }
        }
        argmax[c] = best_t;
        pre_a[c] = best_a;
        pre_b[c] = best_b;
        pooled[c] = best;
    }
    CacheDetail::Gated {
        argmax,
        pre_a,
        pre_b,
        pooled,
    }
}

fn conv_pool_forward(
    emb64: &[f64],
    e_dim: usize,
    blocks: &[ConvBlock],
    store: &WeightStore,
) -> CacheDetail {
    let mut x = emb64.to_vec();
    let mut c_in = e_dim;
    let mut len = x.len() / c_in;
    let mut pre_acts = Vec::with_capacity(blocks.len());
    let mut pool_argmax = Vec::with_capacity(blocks.len());
    for (i, blk) in blocks.iter().enumerate() {
        let w = store.get(&format!("conv{i}.weight")).unwrap();
        let bias = store.get(&format!("conv{i}.bias")).unwrap();
        let wt = transposed_kernel(w);
        let span = blk.kernel * c_in;
        let conv_len = (len - blk.kernel) / blk.stride + 1;
        let c = blk.channels;

        let mut pre64 = vec![0.0f64; conv_len * c];
        for t in 0..conv_len {
            let win = &x[t * blk.stride * c_in..t * blk.stride * c_in + span];
            let row = &mut pre64[t * c..(t + 1) * c];
            for (co, out) in row.iter_mut().enumerate() {
                *out = bias.data()[co] as f64 + dot(win, &wt[co * span..(co + 1) * span]);
            }
        }

        // Max-pool the raw conv values, then ReLU the winner; monotone
        // ReLU makes this identical to ReLU-then-pool.
        let pool_len = (conv_len - blk.pool_width) / blk.pool_stride + 1;
        let mut pooled = vec![0.0f64; pool_len * c];
        let mut argmax = vec![0usize; pool_len * c];
        for tp in 0..pool_len {
            for co in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_t = 0usize;
                for j in 0..blk.pool_width {
                    let t = tp * blk.pool_stride + j;
                    let v = pre64[t * c + co];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                pooled[tp * c + co] = best.max(0.0);
                argmax[tp * c + co] = best_t;
            }
        }
        pre_acts.push(pre64.iter().map(|&v| v as f32).collect());
        pool_argmax.push(argmax);
        x = pooled;
        c_in = c;
        len = pool_len;
    }

    let c = c_in;
    let mut pooled = vec![0.0f64; c];
    let mut global_argmax = vec![0usize; c];
    for co in 0..c {
        let mut best = f64::NEG_INFINITY;
        let mut best_t = 0usize;
        for t in 0..len {
            let v = x[t * c + co];
            if v > best {
                best = v;
                best_t = t;
            }
        }
        pooled[co] = best;
        global_argmax[co] = best_t;
    }
    CacheDetail::ConvPool {
        pre_acts,
        pool_argmax,
        global_argmax,
        pooled,
    }
}

fn head_forward(
    cfg: &ModelConfig,
    store: &WeightStore,
    pooled: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let fc_w = store.get("fc.weight").unwrap();
    let fc_b = store.get("fc.bias").unwrap();
    let out_dim = cfg.output.dim();
    let c = pooled.len();
    let mut logits = vec![0.0f64; out_dim];
    for (o, logit) in logits.iter_mut().enumerate() {
        let mut acc = fc_b.data()[o] as f64;
        for (cc, &m) in pooled.iter().enumerate() {
            acc += fc_w.data()[o * c + cc] as f64 * m;
        }
        *logit = acc;
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("logits"));
    }
    let outputs = match cfg.output {
        OutputHead::Softmax2 => {
            let mx = logits[0].max(logits[1]);
            let e0 = (logits[0] - mx).exp();
            let e1 = (logits[1] - mx).exp();
            let z = e0 + e1;
            vec![e0 / z, e1 / z]
        }
        OutputHead::Sigmoid1 => vec![sigmoid(logits[0])],
    };
    Ok((logits, outputs))
}

/// Chain-rule seed on the logits for a scalar target.
fn seed_dlogits(output: OutputHead, outputs: &[f64], target: ScoreTarget, d_score: f64) -> Vec<f64> {
    match (output, target) {
        (OutputHead::Softmax2, ScoreTarget::MalwareScore) => {
            let (p0, p1) = (outputs[0], outputs[1]);
            vec![-p1 * p0 * d_score, p1 * p0 * d_score]
        }
        (OutputHead::Softmax2, ScoreTarget::MalwareLogit) => vec![0.0, d_score],
        (OutputHead::Sigmoid1, ScoreTarget::MalwareScore) => {
            let m = outputs[0];
            vec![m * (1.0 - m) * d_score]
        }
        (OutputHead::Sigmoid1, ScoreTarget::MalwareLogit) => vec![d_score],
    }
}

fn check_cache(cfg: &ModelConfig, store: &WeightStore, cache: &ForwardCache) -> Result<(), NnError> {
    if cache.generation != store.generation() {
        return Err(NnError::StaleCache);
    }
    if cache.arch != cfg.arch || cache.emb.len() != cfg.window * cfg.embed_dim {
        return Err(NnError::ShapeMismatch(
            "forward cache does not match this config".into(),
        ));
    }
    Ok(())
}

/// Gradient of the chosen scalar target with respect to the embedded
/// input, `[window × embed_dim]`.
pub fn backward_input(
    cfg: &ModelConfig,
    store: &WeightStore,
    cache: &ForwardCache,
    target: ScoreTarget,
    d_score: f64,
) -> Result<Tensor, NnError> {
    let seed = seed_dlogits(cfg.output, &cache.outputs, target, d_score);
    backward_input_seeded(cfg, store, cache, &seed)
}

pub(crate) fn backward_input_seeded(
    cfg: &ModelConfig,
    store: &WeightStore,
    cache: &ForwardCache,
    d_logits: &[f64],
) -> Result<Tensor, NnError> {
    check_cache(cfg, store, cache)?;
    let (d_emb, _) = backward_core(cfg, store, cache, d_logits, false);
    Tensor::new(
        vec![cfg.window, cfg.embed_dim],
        d_emb.iter().map(|&v| v as f32).collect(),
    )
}

/// Gradient of the chosen scalar target with respect to every weight
/// tensor, shaped like the weight store itself.  Requires a cache from
/// [`forward_bytes`] (the embedding-table gradient needs the tokens).
pub fn backward_params(
    cfg: &ModelConfig,
    store: &WeightStore,
    cache: &ForwardCache,
    target: ScoreTarget,
    d_score: f64,
) -> Result<WeightStore, NnError> {
    let seed = seed_dlogits(cfg.output, &cache.outputs, target, d_score);
    backward_params_seeded(cfg, store, cache, &seed)
}

pub(crate) fn backward_params_seeded(
    cfg: &ModelConfig,
    store: &WeightStore,
    cache: &ForwardCache,
    d_logits: &[f64],
) -> Result<WeightStore, NnError> {
    check_cache(cfg, store, cache)?;
    let tokens = cache.tokens.as_ref().ok_or(NnError::CacheMissingTokens)?;
    let (d_emb, grads) = backward_core(cfg, store, cache, d_logits, true);
    let grads = grads.expect("param grads requested");

    let e = cfg.embed_dim;
    let mut d_table = vec![0.0f64; cfg.vocab * e];
    for (p, &tok) in tokens.iter().enumerate() {
        for ee in 0..e {
            d_table[tok as usize * e + ee] += d_emb[p * e + ee];
        }
    }

    let plan = cfg.tensor_plan();
    let mut entries = Vec::with_capacity(plan.len());
    let mut grads = grads.into_iter();
    for spec in plan {
        let data64 = if spec.name == "embedding" {
            std::mem::take(&mut d_table)
        } else {
            let (name, g) = grads.next().expect("gradient for every planned tensor");
            debug_assert_eq!(name, spec.name);
            g
        };
        let data: Vec<f32> = data64.iter().map(|&v| v as f32).collect();
        entries.push((spec.name, Tensor::new(spec.shape, data)?));
    }
    WeightStore::new(entries)
}

/// Shared backward sweep.  Returns the input gradient and, when asked,
/// the non-embedding parameter gradients in tensor-plan order.
#[allow(clippy::type_complexity)]
fn backward_core(
    cfg: &ModelConfig,
    store: &WeightStore,
    cache: &ForwardCache,
    d_logits: &[f64],
    want_params: bool,
) -> (Vec<f64>, Option<Vec<(String, Vec<f64>)>>) {
    assert_eq!(d_logits.len(), cfg.output.dim());
    let e = cfg.embed_dim;
    let fc_w = store.get("fc.weight").unwrap();
    let c_head = cfg.head_inputs();

    let mut d_m = vec![0.0f64; c_head];
    for (o, &dl) in d_logits.iter().enumerate() {
        if dl == 0.0 {
            continue;
        }
        for (cc, dm) in d_m.iter_mut().enumerate() {
            *dm += dl * fc_w.data()[o * c_head + cc] as f64;
        }
    }

    let pooled = match &cache.detail {
        CacheDetail::Gated { pooled, .. } => pooled,
        CacheDetail::ConvPool { pooled, .. } => pooled,
    };
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();

    let d_emb = match (&cfg.layers, &cache.detail) {
        (
            LayerPlan::Gated {
                channels,
                kernel,
                stride,
            },
            CacheDetail::Gated {
                argmax,
                pre_a,
                pre_b,
                ..
            },
        ) => {
            let wa = store.get("conv_a.weight").unwrap();
            let wb = store.get("conv_b.weight").unwrap();
            let mut d_emb = vec![0.0f64; cfg.window * e];
            let mut d_wa = vec![0.0f64; wa.numel()];
            let mut d_wb = vec![0.0f64; wb.numel()];
            let mut d_ba = vec![0.0f64; *channels];
            let mut d_bb = vec![0.0f64; *channels];
            for c in 0..*channels {
                let s = sigmoid(pre_b[c]);
                let d_a = d_m[c] * s;
                let d_b = d_m[c] * pre_a[c] * s * (1.0 - s);
                let base = argmax[c] * stride * e;
                for k in 0..*kernel {
                    for ee in 0..e {
                        let wi = c * (e * kernel) + ee * kernel + k;
                        let xi = base + k * e + ee;
                        d_emb[xi] += d_a * wa.data()[wi] as f64 + d_b * wb.data()[wi] as f64;
                        if want_params {
                            let x = cache.emb[xi] as f64;
                            d_wa[wi] += d_a * x;
                            d_wb[wi] += d_b * x;
                        }
                    }
                }
                d_ba[c] = d_a;
                d_bb[c] = d_b;
            }
            if want_params {
                grads.push(("conv_a.weight".into(), d_wa));
                grads.push(("conv_a.bias".into(), d_ba));
                grads.push(("conv_b.weight".into(), d_wb));
                grads.push(("conv_b.bias".into(), d_bb));
            }
            d_emb
        }
        (
            LayerPlan::ConvPool { blocks },
            CacheDetail::ConvPool {
                pre_acts,
                pool_argmax,
                global_argmax,
                ..
            },
        ) => {
            let lens = cfg.stage_lengths().expect("validated config");
            let c_last = blocks.last().unwrap().channels;
            let mut d_x = vec![0.0f64; lens[blocks.len()] * c_last];
            for (c, &t) in global_argmax.iter().enumerate() {
                d_x[t * c_last + c] += d_m[c];
            }
            let mut d_ws: Vec<Vec<f64>> = Vec::new();
            let mut d_bs: Vec<Vec<f64>> = Vec::new();
            for i in (0..blocks.len()).rev() {
                let blk = &blocks[i];
                let c_out = blk.channels;
                let c_in = if i == 0 { e } else { blocks[i - 1].channels };
                let len_in = lens[i];
                let conv_len = (len_in - blk.kernel) / blk.stride + 1;

                // Pool + ReLU backward: route to the cached argmax when
                // the winning pre-activation was positive.
                let mut d_pre = vec![0.0f64; conv_len * c_out];
                for (idx, &g) in d_x.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let c = idx % c_out;
                    let t = pool_argmax[i][idx];
                    if pre_acts[i][t * c_out + c] > 0.0 {
                        d_pre[t * c_out + c] += g;
                    }
                }

                let w = store.get(&format!("conv{i}.weight")).unwrap();
                let wd = w.data();
                let x_in: Option<Vec<f64>> = if want_params {
                    Some(if i == 0 {
                        cache.emb.iter().map(|&v| v as f64).collect()
                    } else {
                        reconstruct_pooled(&pre_acts[i - 1], &pool_argmax[i - 1], c_out_of(blocks, i - 1))
                    })
                } else {
                    None
                };
                let mut d_w = vec![0.0f64; w.numel()];
                let mut d_b = vec![0.0f64; c_out];
                let mut d_x_in = vec![0.0f64; len_in * c_in];
                for t in 0..conv_len {
                    for c in 0..c_out {
                        let g = d_pre[t * c_out + c];
                        if g == 0.0 {
                            continue;
                        }
                        d_b[c] += g;
                        for k in 0..blk.kernel {
                            let pos = (t * blk.stride + k) * c_in;
                            for ci in 0..c_in {
                                let wi = c * (c_in * blk.kernel) + ci * blk.kernel + k;
                                d_x_in[pos + ci] += g * wd[wi] as f64;
                                if let Some(x) = &x_in {
                                    d_w[wi] += g * x[pos + ci];
                                }
                            }
                        }
                    }
                }
                if want_params {
                    d_ws.push(d_w);
                    d_bs.push(d_b);
                }
                d_x = d_x_in;
            }
            if want_params {
                // Collected in reverse block order; emit plan order.
                for i in 0..blocks.len() {
                    let j = blocks.len() - 1 - i;
                    grads.push((format!("conv{i}.weight"), std::mem::take(&mut d_ws[j])));
                    grads.push((format!("conv{i}.bias"), std::mem::take(&mut d_bs[j])));
                }
            }
            d_x
        }
        _ => unreachable!("cache arch checked against config"),
    };

    if want_params {
        let out_dim = cfg.output.dim();
        let mut d_fcw = vec![0.0f64; out_dim * c_head];
        for (o, &dl) in d_logits.iter().enumerate() {
            for (cc, &m) in pooled.iter().enumerate() {
                d_fcw[o * c_head + cc] = dl * m;
            }
        }
        grads.push(("fc.weight".into(), d_fcw));
        grads.push(("fc.bias".into(), d_logits.to_vec()));
        (d_emb, Some(grads))
    } else {
        (d_emb, None)
    }
}

fn c_out_of(blocks: &[ConvBlock], i: usize) -> usize {
    blocks[i].channels
}

/// Rebuild a block's pooled output from its cached pre-activations.
fn reconstruct_pooled(pre: &[f32], argmax: &[usize], channels: usize) -> Vec<f64> {
    argmax
        .iter()
        .enumerate()
        .map(|(idx, &t)| {
            let c = idx % channels;
            (pre[t * channels + c] as f64).max(0.0)
        })
        .collect()
}
