//! Frozen toy decoder with low-rank adapters on the query and value
//! projections.
//!
//! The decoder is a pre-norm causal transformer with learned absolute
//! positions and an output head tied to the token table. Its base weights
//! never train; each layer carries `W_q + A_q B_q` and `W_v + A_v B_v`, with
//! the sum recomputed on every forward pass.

use usam_numerics::{Binder, Tape, Tensor, Var};

use crate::config::{ModelConfig, SYMBOLS};
use crate::error::{Result, UsamError};
use crate::nn::{self, Init};

pub const BOS: usize = SYMBOLS;
pub const EOS: usize = SYMBOLS + 1;
pub const PAD: usize = SYMBOLS + 2;

pub const TOK_EMBED: &str = "lm.tok_embed";
pub const POS_EMBED: &str = "lm.pos_embed";
pub const AUDIO_PROJ: &str = "lm.audio_proj";
pub const LN_F: &str = "lm.ln_f";

pub fn layer_prefix(l: usize) -> String {
    format!("lm.layer.{l}")
}

pub fn init(init: &mut Init, config: &ModelConfig) -> Result<()> {
    let d = config.d_model;
    init.normal(TOK_EMBED, &[config.vocab_size(), d], 1.0, false)?;
    init.normal(POS_EMBED, &[config.lm_max_seq, d], 0.5, false)?;
    for l in 0..config.lm_layers {
        let p = layer_prefix(l);
        init.layer_norm(&format!("{p}.ln1"), d, false)?;
        init.layer_norm(&format!("{p}.ln2"), d, false)?;
        for w in ["wq", "wk", "wv", "wo"] {
            init.linear(&format!("{p}.attn.{w}"), d, d, false, false)?;
        }
        init.mlp(&format!("{p}.ffn"), d, config.lm_ffn, d, false)?;
        for target in ["lora_q", "lora_v"] {
            init.normal(&format!("{p}.{target}.a"), &[d, config.lora_rank], config.lora_init_std, true)?;
            init.constant(&format!("{p}.{target}.b"), &[config.lora_rank, d], 0.0, true)?;
        }
    }
    init.layer_norm(LN_F, d, false)?;
    init.linear(AUDIO_PROJ, d, d, true, true)
}

/// `W + scale * A B`.
pub fn lora_apply(tape: &Tape, base: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let (ws, as_, bs) = (tape.shape(base), tape.shape(a), tape.shape(b));
    let rank = as_[1];
    if rank >= ws[0].min(ws[1]) {
        return Err(UsamError::config(format!(
            "adapter rank {rank} must be below the model width {}",
            ws[0].min(ws[1])
        )));
    }
    if ws.len() != 2 || as_ != [ws[0], rank] || bs != [rank, ws[1]] {
        return Err(UsamError::arg(format!("adapter {as_:?}x{bs:?} does not fit {ws:?}")));
    }
    let delta = tape.scale(tape.matmul(a, b)?, scale);
    Ok(tape.add(base, delta)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Audio,
    Prompt,
    Text,
    Pad,
}

/// One decoder input, before positions are added.
pub struct LmSequence {
    /// `[L, d]`
    pub embeds: Var,
    /// Next-token label per position (`PAD` where unused).
    pub labels: Vec<usize>,
    pub loss_mask: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl LmSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `[audio_proj(phi); prompt; BOS, y_0 .. y_{n-1}]`, labelled
/// `y_0 .. y_{n-1}, EOS` on the text segment only.
pub fn build_sequence(b: &Binder, phi: Var, prompt: &[usize], targets: &[usize]) -> Result<LmSequence> {
    let t = b.tape();
    let table = b.param(TOK_EMBED)?;
    let audio = nn::linear(b, AUDIO_PROJ, phi)?;
    let la = t.shape(audio)[0];
    let mut text_in = Vec::with_capacity(targets.len() + 1);
    text_in.push(BOS);
    text_in.extend_from_slice(targets);
    let mut parts = vec![audio];
    if !prompt.is_empty() {
        parts.push(t.embedding_lookup(table, prompt)?);
    }
    parts.push(t.embedding_lookup(table, &text_in)?);
    let embeds = t.concat(&parts, 0)?;

    let prefix = la + prompt.len();
    let total = prefix + text_in.len();
    let mut labels = vec![PAD; total];
    let mut loss_mask = vec![0.0; total];
    for (j, &y) in targets.iter().chain(std::iter::once(&EOS)).enumerate() {
        labels[prefix + j] = y;
        loss_mask[prefix + j] = 1.0;
    }
    let mut segments = vec![Segment::Audio; la];
    segments.extend(std::iter::repeat_n(Segment::Prompt, prompt.len()));
    segments.extend(std::iter::repeat_n(Segment::Text, text_in.len()));
    Ok(LmSequence {
        embeds,
        labels,
        loss_mask,
        segments,
    })
}

/// Right-pads sequences to a common length and stacks them: `[B, L, d]`.
/// Causal attention keeps padding invisible to every real position.
pub fn batch_sequences(tape: &Tape, seqs: &[LmSequence]) -> Result<(Var, Vec<usize>, Vec<f64>)> {
    let len = seqs.iter().map(LmSequence::len).max().ok_or_else(|| UsamError::arg("empty batch"))?;
    let mut rows = Vec::with_capacity(seqs.len());
    let mut labels = Vec::with_capacity(seqs.len() * len);
    let mut mask = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        let d = tape.shape(s.embeds)[1];
        let mut e = s.embeds;
        if s.len() < len {
            let pad = tape.constant(Tensor::zeros(&[len - s.len(), d]));
            e = tape.concat(&[e, pad], 0)?;
        }
        rows.push(tape.reshape(e, &[1, len, d])?);
        labels.extend(s.labels.iter().copied().chain(std::iter::repeat_n(PAD, len - s.len())));
        mask.extend(s.loss_mask.iter().copied().chain(std::iter::repeat_n(0.0, len - s.len())));
    }
    Ok((tape.concat(&rows, 0)?, labels, mask))
}

/// Strictly-upper-triangular `-inf` bias, `[L, L]`.
pub fn causal_bias(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![len, len], m).expect("nonzero length")
}

/// Which parts of the adapted model to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adapters {
    On,
    Off,
}

fn attention(b: &Binder, config: &ModelConfig, prefix: &str, x: Var, adapters: Adapters) -> Result<Var> {
    let t = b.tape();
    let shape = t.shape(x);
    let (len, d) = (shape[1], shape[2]);
    let heads = config.lm_heads;
    let dh = d / heads;
    let weight = |name: &str, lora: Option<&str>| -> Result<Var> {
        let w = b.param(&format!("{prefix}.attn.{name}.weight"))?;
        match (lora, adapters) {
            (Some(l), Adapters::On) => lora_apply(
                t,
                w,
                b.param(&format!("{prefix}.{l}.a"))?,
                b.param(&format!("{prefix}.{l}.b"))?,
                config.lora_scale,
            ),
            _ => Ok(w),
        }
    };
    let q = t.matmul(x, weight("wq", Some("lora_q"))?)?;
    let k = t.matmul(x, weight("wk", None)?)?;
    let v = t.matmul(x, weight("wv", Some("lora_v"))?)?;
    let bias = t.constant(causal_bias(len));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = t.slice(q, 2, lo, hi)?;
        let kh = t.slice(k, 2, lo, hi)?;
        let vh = t.slice(v, 2, lo, hi)?;
        let scores = t.add(t.scale(t.matmul(qh, t.transpose(kh)?)?, scale), bias)?;
        outs.push(t.matmul(t.softmax(scores, 2)?, vh)?);
    }
    let ctx = t.concat(&outs, 2)?;
    Ok(t.matmul(ctx, weight("wo", None)?)?)
}

/// Logits `[B, L, vocab]` for inputs `h: [B, L, d]` (positions added here).
pub fn decoder_forward(b: &Binder, config: &ModelConfig, h: Var, adapters: Adapters) -> Result<Var> {
    let t = b.tape();
    let shape = t.shape(h);
    if shape.len() != 3 {
        return Err(UsamError::arg(format!("decoder input must be [B, L, d], got {shape:?}")));
    }
    let len = shape[1];
    if len > config.lm_max_seq {
        return Err(UsamError::arg(format!(
            "sequence of {len} positions exceeds the maximum {}",
            config.lm_max_seq
        )));
    }
    let pos = t.slice(b.param(POS_EMBED)?, 0, 0, len)?;
    let mut x = t.add(h, pos)?;
    for l in 0..config.lm_layers {
        let p = layer_prefix(l);
        let a = attention(b, config, &p, nn::layer_norm(b, &format!("{p}.ln1"), x)?, adapters)?;
        x = t.add(x, a)?;
        let f = nn::mlp(b, &format!("{p}.ffn"), nn::layer_norm(b, &format!("{p}.ln2"), x)?)?;
        x = t.add(x, f)?;
    }
    let x = nn::layer_norm(b, LN_F, x)?;
    let head = t.transpose(b.param(TOK_EMBED)?)?;
    Ok(t.scale(t.matmul(x, head)?, config.logit_scale))
}

/// Mean negative log-likelihood of `labels` over positions where `mask` is
/// 1. `logits: [..., V]` flattened row-major against `labels`.
pub fn ce_loss(tape: &Tape, logits: Var, labels: &[usize], mask: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits);
    let vocab = *shape.last().expect("rank >= 1");
    let rows: usize = shape.iter().product::<usize>() / vocab;
    if labels.len() != rows || mask.len() != rows {
        return Err(UsamError::arg(format!(
            "{} labels and {} mask entries for {rows} positions",
            labels.len(),
            mask.len()
        )));
    }
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Err(UsamError::config("loss mask selects no positions"));
    }
    let mut pick = vec![0.0; rows * vocab];
    for (r, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m != 0.0 {
            if y >= vocab {
                return Err(UsamError::arg(format!("label {y} outside vocabulary of {vocab}")));
            }
            pick[r * vocab + y] = m / count;
        }
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, tape.constant(Tensor::new(shape, pick)?))?;
    Ok(tape.neg(tape.sum_all(picked)))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prefix: [P, d]` (audio and prompt) starting from
/// BOS. Stops at EOS or after `max_new` tokens; EOS is not returned.
pub fn greedy_decode(b: &Binder, config: &ModelConfig, prefix: Var, max_new: usize) -> Result<Vec<usize>> {
    let t = b.tape();
    let table = b.param(TOK_EMBED)?;
    let d = t.shape(prefix)[1];
    let mut out = Vec::new();
    let mut inputs = vec![BOS];
    while out.len() < max_new {
        let tokens = t.embedding_lookup(table, &inputs)?;
        let seq = t.concat(&[prefix, tokens], 0)?;
        let len = t.shape(seq)[0];
        let h = t.reshape(seq, &[1, len, d])?;
        let logits = decoder_forward(b, config, h, Adapters::On)?;
        let last = t.value(logits).row(len - 1).to_vec();
        let next = argmax(&last);
        if next == EOS {
            break;
        }
        out.push(next);
        inputs.push(next);
    }
    Ok(out)
}
