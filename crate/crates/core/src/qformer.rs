//! Window-level Q-Former.
//!
//! The projected fused sequence is cut into consecutive non-overlapping
//! windows of `W` frames (the last one may be ragged). The trainable queries
//! pass through one self-attention block, then attend to each window's valid
//! frames with single-head cross-attention. Every window emits `N` vectors,
//! so the output length is `ceil(T / W) * N` and grows with the input.

use usam_numerics::{Binder, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Result, UsamError};
use crate::nn::{self, Init};

pub const QUERY: &str = "qformer.query";
pub const INPUT_PROJ: &str = "qformer.input_proj";

/// `ceil(frames / window) * queries`
pub fn output_len(frames: usize, window: usize, queries: usize) -> usize {
    frames.div_ceil(window) * queries
}

pub fn init(init: &mut Init, config: &ModelConfig) -> Result<()> {
    let d = config.d_model;
    init.linear(INPUT_PROJ, config.fused_dim(), d, true, true)?;
    init.normal(QUERY, &[config.num_queries, d], 1.0, true)?;
    init.layer_norm("qformer.self_attn.ln", d, true)?;
    init.layer_norm("qformer.cross_attn.ln_q", d, true)?;
    init.layer_norm("qformer.cross_attn.ln_kv", d, true)?;
    for block in ["self_attn", "cross_attn"] {
        for w in ["wq", "wk", "wv", "wo"] {
            init.linear(&format!("qformer.{block}.{w}"), d, d, false, true)?;
        }
    }
    Ok(())
}

/// Trainable per-frame map from fused channels to `d_model`.
pub fn input_proj(b: &Binder, fused: Var) -> Result<Var> {
    nn::linear(b, INPUT_PROJ, fused)
}

pub struct QueryFeatures {
    /// `[B, ceil(T/W) * N, d_model]`
    pub values: Var,
    pub windows: usize,
    pub queries: usize,
    /// Per example, number of leading windows holding at least one valid
    /// frame.
    pub valid_windows: Vec<usize>,
    /// Windows with no valid frame; they emit the self-attended query.
    pub empty_windows: usize,
    /// Cross-attention weights `[B, windows, N, W]`.
    pub attention: Var,
}

impl QueryFeatures {
    pub fn len(&self) -> usize {
        self.windows * self.queries
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source window of output position `pos`.
    pub fn window_of(&self, pos: usize) -> usize {
        pos / self.queries
    }

    /// Output rows of example `b` that came from non-empty windows.
    pub fn valid_len(&self, b: usize) -> usize {
        self.valid_windows[b] * self.queries
    }
}

/// `SelfAttention(Q)` followed by windowed `CrossAttention(., U)`, both
/// pre-norm residual blocks.
pub fn window_qformer(
    b: &Binder,
    config: &ModelConfig,
    projected: Var,
    mask: &Tensor,
) -> Result<QueryFeatures> {
    let t = b.tape();
    let d = config.d_model;
    let w = config.qformer_window;
    let shape = t.shape(projected);
    if shape.len() != 3 || shape[2] != d || mask.shape() != &shape[..2] {
        return Err(UsamError::arg(format!(
            "qformer input {shape:?} incompatible with mask {:?}",
            mask.shape()
        )));
    }
    let (batch, frames) = (shape[0], shape[1]);
    let windows = frames.div_ceil(w);
    let padded = windows * w;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // Self-attention over the queries.
    let q0 = b.param(QUERY)?;
    let n = t.shape(q0)[0];
    let h = nn::layer_norm(b, "qformer.self_attn.ln", q0)?;
    let sq = nn::linear(b, "qformer.self_attn.wq", h)?;
    let sk = nn::linear(b, "qformer.self_attn.wk", h)?;
    let sv = nn::linear(b, "qformer.self_attn.wv", h)?;
    let logits = t.scale(t.matmul(sq, t.transpose(sk)?)?, inv_sqrt_d);
    let weights = t.softmax(logits, 1)?;
    let sa = nn::linear(b, "qformer.self_attn.wo", t.matmul(weights, sv)?)?;
    let q1 = t.add(q0, sa)?;

    // Cross-attention, every window at once: [B, windows, W, d].
    let frames_in = if padded > frames {
        let pad = t.constant(Tensor::zeros(&[batch, padded - frames, d]));
        t.concat(&[projected, pad], 1)?
    } else {
        projected
    };
    let kv = nn::layer_norm(b, "qformer.cross_attn.ln_kv", frames_in)?;
    let keys = t.reshape(nn::linear(b, "qformer.cross_attn.wk", kv)?, &[batch, windows, w, d])?;
    let vals = t.reshape(nn::linear(b, "qformer.cross_attn.wv", kv)?, &[batch, windows, w, d])?;
    let hq = nn::layer_norm(b, "qformer.cross_attn.ln_q", q1)?;
    let cq = nn::linear(b, "qformer.cross_attn.wq", hq)?;
    let scores = t.scale(t.matmul(cq, t.transpose(keys)?)?, inv_sqrt_d);

    let mut bias = vec![0.0; batch * windows * w];
    let mut keep = vec![0.0; batch * windows];
    let mut valid_windows = vec![0; batch];
    let mut empty_windows = 0;
    let m = mask.data();
    for bi in 0..batch {
        for wi in 0..windows {
            let valid: Vec<bool> = (0..w)
                .map(|j| {
                    let f = wi * w + j;
                    f < frames && m[bi * frames + f] > 0.0
                })
                .collect();
            if valid.iter().any(|&v| v) {
                keep[bi * windows + wi] = 1.0;
                valid_windows[bi] = wi + 1;
                for (j, &v) in valid.iter().enumerate() {
                    if !v {
                        bias[(bi * windows + wi) * w + j] = f64::NEG_INFINITY;
                    }
                }
            } else {
                empty_windows += 1;
            }
        }
    }
    let bias = t.constant(Tensor::new(vec![batch, windows, 1, w], bias)?);
    let attention = t.softmax(t.add(scores, bias)?, 3)?;
    let ctx = t.matmul(attention, vals)?;
    let out = nn::linear(b, "qformer.cross_attn.wo", ctx)?;
    let keep = t.constant(Tensor::new(vec![batch, windows, 1, 1], keep)?);
    let out = t.mul(out, keep)?;
    let z = t.add(out, q1)?;
    let values = t.reshape(z, &[batch, windows * n, d])?;
    Ok(QueryFeatures {
        values,
        windows,
        queries: n,
        valid_windows,
        empty_windows,
        attention,
    })
}
